"""Dense NCHW tensors with a small reverse-mode autodiff engine.

Every kernel is a plain function of numpy arrays. Results keep the dtype of
their inputs, so the same code path runs in float32 for training and in
float64 for gradient and oracle checks.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class ConfigError(ValueError):
    """Layer hyper-parameters violate a divisibility or range constraint."""


class UnsupportedOpError(RuntimeError):
    """A recorded node has no backward rule."""


_grad_enabled = True
_madds_counter: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_madds():
    """Count multiply-accumulates executed by the instrumented kernels.

    Yields a one-element list whose entry is the running total.
    """
    global _madds_counter
    prev, _madds_counter = _madds_counter, [0]
    try:
        yield _madds_counter
    finally:
        _madds_counter = prev


def _tally(n: int) -> None:
    if _madds_counter is not None:
        _madds_counter[0] += int(n)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        self._accum(np.asarray(grad, dtype=self.dtype))
        for node in reversed(order):
            if not node._parents:
                continue
            if node._backward is None:
                raise UnsupportedOpError(f"no backward rule for op {node.op!r}")
            if node.grad is not None:
                node._backward(node.grad)
                # intermediate grads are not needed after propagation
                node.grad = None

    # operator sugar over the kernels below
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _topo(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: a._accum(-g), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: x._accum(g * mask), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(s, (x,), lambda g: x._accum(g * s * (1 - s)), "sigmoid")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(old)), "reshape")


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / n)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return _make(x.data * keep, (x,), lambda g: x._accum(g * keep), "dropout")


# ----------------------------------------------------------------------------
# channel indexing


def channel_permute(x: Tensor, perm: np.ndarray) -> Tensor:
    """Output channel i takes input channel perm[i]."""
    perm = np.asarray(perm)
    if x.ndim != 4 or perm.shape != (x.shape[1],):
        raise ShapeError(f"channel_permute: perm of length {perm.shape} for {x.shape}")
    inv = np.argsort(perm)
    return _make(x.data[:, perm], (x,), lambda g: x._accum(g[:, inv]), "channel_permute")


def roll_channels(x: Tensor, shift: int) -> Tensor:
    """Output channel i takes input channel (i + shift) mod C."""
    out = np.roll(x.data, -shift, axis=1)
    return _make(out, (x,), lambda g: x._accum(np.roll(g, shift, axis=1)), "roll_channels")


# ----------------------------------------------------------------------------
# convolution


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_hw(h: int, w: int, kernel, stride, padding) -> Tuple[int, int]:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _grouped_1x1(xs: np.ndarray, wg: np.ndarray) -> np.ndarray:
    # xs: (N, G, Cg, Q), wg: (G, Og, Cg) -> (N, G, Og, Q)
    n, g, cg, q = xs.shape
    _tally(n * g * wg.shape[1] * cg * q)
    if cg == 1:
        return xs * wg[None, :, :, :1].reshape(1, g, -1, 1)
    return np.matmul(wg[None], xs)


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0, groups: int = 1,
           bias: Optional[Tensor] = None) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``w`` has shape (C_out, C_in // groups, k_h, k_w). The kernel is a sum of
    strided 1x1 grouped products, one per kernel tap.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    if groups < 1 or c % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide C_in={c} and C_out={cout}")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ConfigError("strides must be >= 1")
    ho, wo = conv_output_hw(h, wd, (kh, kw), (sh, sw), (ph, pw))
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{wd} too small for kernel {kh}x{kw}")
    og = cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wg = w.data.reshape(groups, og, cg, kh, kw)

    out = None
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
            part = _grouped_1x1(xs.reshape(n, groups, cg, ho * wo), wg[..., i, j])
            out = part if out is None else out + part
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        gg = g.reshape(n, groups, og, ho * wo)
        if w.requires_grad:
            gw = np.empty_like(wg)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
                    xs = xs.reshape(n, groups, cg, ho * wo)
                    gw[..., i, j] = np.matmul(gg, xs.transpose(0, 1, 3, 2)).sum(axis=0)
            w._accum(gw.reshape(w.shape))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            wt = wg.transpose(0, 2, 1, 3, 4)  # (G, Cg, Og, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    part = np.matmul(wt[None, ..., i, j], gg).reshape(n, c, ho, wo)
                    gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += part
            x._accum(gxp[:, :, ph:ph + h, pw:pw + wd])
        if bias is not None:
            bias._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Per-channel spatial filtering; ``w`` is (C * t, 1, k_h, k_w).

    Input channel c produces output channels c*t .. c*t + t - 1.
    """
    c = x.shape[1]
    if w.shape[1] != 1 or w.shape[0] % c:
        raise ShapeError(f"depthwise weight {w.shape} incompatible with {c} channels")
    return conv2d(x, w, stride=stride, padding=padding, groups=c)


# ----------------------------------------------------------------------------
# pooling, dense, normalization


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = 1.0 / (h * w)
    return _make(out, (x,), lambda g: x._accum(np.broadcast_to(g * scale, x.shape).copy()),
                 "global_avg_pool")


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x`` (N, C_in), ``w`` (C_out, C_in) -> (N, C_out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: {x.shape} @ {w.shape}^T")
    _tally(x.shape[0] * w.shape[0] * w.shape[1])
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        x._accum(g @ w.data)
        w._accum(g.T @ x.data)
        if b is not None:
            b._accum(g.sum(axis=0))

    return _make(out, (x, w) if b is None else (x, w, b), backward, "fully_connected")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the op is the fixed affine map.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels vs gamma {gamma.shape}")
    shp = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(shp)) * inv.reshape(shp)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def backward(g):
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            beta._accum(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = g * gamma.data.reshape(shp)
                gx = (gx - gx.mean(axis=(0, 2, 3), keepdims=True)
                      - xhat * (gx * xhat).mean(axis=(0, 2, 3), keepdims=True))
                x._accum(gx * inv.reshape(shp))
    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(shp).astype(x.dtype)) * inv.reshape(shp).astype(x.dtype)
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def backward(g):
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
            beta._accum(g.sum(axis=(0, 2, 3)))
            x._accum(g * scale.reshape(shp))

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        x._accum(g - s * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), backward, "log_softmax")


# ----------------------------------------------------------------------------
# resampling


def _bilinear_taps(n: int):
    # half-pixel centres, edge-clamped
    src = (np.arange(2 * n) + 0.5) / 2 - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    w1 = src - i0
    return i0, i1, w1


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    r0, r1, rw = _bilinear_taps(h)
    c0, c1, cw = _bilinear_taps(w)
    dt = x.dtype
    rw_, cw_ = rw.astype(dt).reshape(1, 1, -1, 1), cw.astype(dt).reshape(1, 1, 1, -1)
    # rows then columns, two taps each
    _tally(2 * n * c * (2 * h) * w + 2 * n * c * (2 * h) * (2 * w))
    tmp = x.data[:, :, r0, :] * (1 - rw_) + x.data[:, :, r1, :] * rw_
    out = tmp[:, :, :, c0] * (1 - cw_) + tmp[:, :, :, c1] * cw_

    def backward(g):
        gt = np.zeros((n, c, 2 * h, w), dtype=g.dtype)
        np.add.at(gt, (slice(None), slice(None), slice(None), c0), g * (1 - cw_))
        np.add.at(gt, (slice(None), slice(None), slice(None), c1), g * cw_)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), r0), gt * (1 - rw_))
        np.add.at(gx, (slice(None), slice(None), r1), gt * rw_)
        x._accum(gx)

    return _make(out, (x,), backward, "bilinear_upsample_x2")


# ----------------------------------------------------------------------------
# fused shift-max application


def shift_max_apply(x: Tensor, coeffs: Tensor, groups: int) -> Tensor:
    """y[n,i] = max_k sum_j coeffs[n,k,i,j] * x[n, (i + j*C/groups) mod C].

    ``coeffs`` has shape (N, K, C, J). Ties in the max resolve to the lowest k.
    """
    n, c, h, w = x.shape
    if coeffs.ndim != 4 or coeffs.shape[0] != n or coeffs.shape[2] != c:
        raise ShapeError(f"shift_max_apply: coeffs {coeffs.shape} for input {x.shape}")
    if groups < 1 or c % groups:
        raise ConfigError(f"groups={groups} must divide C={c}")
    _, kk, _, jj = coeffs.shape
    step = c // groups
    shifted = [np.roll(x.data, -j * step, axis=1) for j in range(jj)]
    a = coeffs.data[..., None, None]  # (N, K, C, J, 1, 1)
    branches = []
    for k in range(kk):
        acc = a[:, k, :, 0] * shifted[0]
        for j in range(1, jj):
            acc = acc + a[:, k, :, j] * shifted[j]
        branches.append(acc)
    _tally(n * c * h * w * jj * kk)
    stack = np.stack(branches, axis=1)  # (N, K, C, H, W)
    idx = stack.argmax(axis=1)
    out = np.take_along_axis(stack, idx[:, None], axis=1)[:, 0]

    def backward(g):
        gb = np.zeros_like(stack)
        np.put_along_axis(gb, idx[:, None], g[:, None], axis=1)
        if coeffs.requires_grad:
            ga = np.empty_like(coeffs.data)
            for j in range(jj):
                ga[..., j] = (gb * shifted[j][:, None]).sum(axis=(3, 4))
            coeffs._accum(ga)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for j in range(jj):
                gs = (gb * a[..., j, :, :]).sum(axis=1)
                gx += np.roll(gs, j * step, axis=1)
            x._accum(gx)

    return _make(out, (x, coeffs), backward, "shift_max_apply")


def concat_params(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.concatenate([t.data.ravel() for t in tensors])
