"""Parameterised layers built on the tensor kernels.

Each layer is a :class:`Module`. Besides ``forward`` every module implements
``trace(shape, prefix, out)`` which appends ``(name, leaf, input_shape)``
records in execution order and returns the output shape. The accounting code
walks these records instead of running the network.
"""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ConfigError, ShapeError, Tensor

Shape = Tuple[int, int, int, int]


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    # -- traversal ---------------------------------------------------------
    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, m in self._modules.items():
            yield from m.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for mname, m in self.named_modules(prefix):
            for pname, p in m._params.items():
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for mname, m in self.named_modules(prefix):
            for bname, b in m._buffers.items():
                yield (f"{mname}.{bname}" if mname else bname), b

    def num_params(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for mname, m in self.named_modules():
            for bname in list(m._buffers):
                key = f"{mname}.{bname}" if mname else bname
                m.register_buffer(bname, np.array(state[key], dtype=m._buffers[bname].dtype))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            for bname, b in list(m._buffers.items()):
                m.register_buffer(bname, b.astype(dtype))
        return self

    # -- accounting --------------------------------------------------------
    def out_shape(self, shape: Shape) -> Shape:
        return shape

    def trace(self, shape: Shape, prefix: str, out: list) -> Shape:
        out.append((prefix, self, shape))
        return self.out_shape(shape)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel=1, stride=1, padding=0, groups: int = 1,
                 bias: bool = False, rng: Optional[np.random.Generator] = None):
        super().__init__()
        kh, kw = T._pair(kernel)
        if groups < 1 or c_in % groups or c_out % groups:
            raise ConfigError(f"groups={groups} must divide C_in={c_in} and C_out={c_out}")
        self.c_in, self.c_out, self.groups = c_in, c_out, groups
        self.kernel, self.stride, self.padding = (kh, kw), T._pair(stride), T._pair(padding)
        rng = rng or np.random.default_rng(0)
        cg = c_in // groups
        self.weight = Parameter(_he(rng, (c_out, cg, kh, kw), cg * kh * kw))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.stride, self.padding, self.groups, self.bias)

    def out_shape(self, shape: Shape) -> Shape:
        n, c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"conv expects {self.c_in} channels, got {c}")
        ho, wo = T.conv_output_hw(h, w, self.kernel, self.stride, self.padding)
        return (n, self.c_out, ho, wo)

    def __repr__(self):
        return (f"Conv2d({self.c_in}->{self.c_out}, k={self.kernel}, s={self.stride}, "
                f"g={self.groups})")


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.c, self.momentum, self.eps = c, momentum, eps
        self.gamma = Parameter(np.ones(c, np.float32))
        self.beta = Parameter(np.zeros(c, np.float32))
        self.register_buffer("running_mean", np.zeros(c, np.float32))
        self.register_buffer("running_var", np.ones(c, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)

    def affine(self) -> Tuple[np.ndarray, np.ndarray]:
        """Inference-mode (scale, shift) so that bn(x) == scale * x + shift."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - scale * self.running_mean


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class Identity(Module):
    """Pass-through. ``excluded`` marks placeholders that stand in for a layer
    the cost ledger should flag rather than count."""

    def __init__(self, excluded: bool = False):
        super().__init__()
        self.excluded = excluded

    def forward(self, x):
        return x


class ChannelShuffle(Module):
    def __init__(self, perm: np.ndarray):
        super().__init__()
        self.perm = np.asarray(perm)

    def forward(self, x):
        return T.channel_permute(x, self.perm)


class GlobalAvgPool(Module):
    def forward(self, x):
        return T.global_avg_pool(x)

    def out_shape(self, shape):
        return (shape[0], shape[1], 1, 1)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in)).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 4:
            x = x.reshape(x.shape[0], -1)
        return T.fully_connected(x, self.weight, self.bias)

    def out_shape(self, shape):
        c = int(np.prod(shape[1:]))
        if c != self.c_in:
            raise ShapeError(f"linear expects {self.c_in} features, got {c}")
        return (shape[0], self.c_out, 1, 1)


class Dropout(Module):
    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return T.dropout(x, self.p, self.rng, self.training)


class Upsample2x(Module):
    def forward(self, x):
        return T.bilinear_upsample_x2(x)

    def out_shape(self, shape):
        n, c, h, w = shape
        return (n, c, 2 * h, 2 * w)


class Sequential(Module):
    def __init__(self, *layers: Module, names: Optional[Sequence[str]] = None):
        super().__init__()
        names = list(names) if names else [str(i) for i in range(len(layers))]
        self._order = names
        for n, layer in zip(names, layers):
            setattr(self, n, layer)

    def __iter__(self):
        return (getattr(self, n) for n in self._order)

    def __len__(self):
        return len(self._order)

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def trace(self, shape, prefix, out):
        for n in self._order:
            shape = getattr(self, n).trace(shape, f"{prefix}.{n}" if prefix else n, out)
        return shape


class SkipAdd(Module):
    """Marker leaf for the residual addition; used only by ``trace``."""

    def forward(self, x):
        raise RuntimeError("SkipAdd is an accounting marker")
