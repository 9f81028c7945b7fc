"""Property suites with pinned seeds.

Each suite returns a list of :class:`Check` records so the CLI and the test
suite share one implementation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .accounting import count_layer, mf_depthwise_madds
from .arch import ArchSpec, BlockSpec, build_micro_a, build_micro_b, build_micro_c, build_stem
from .factorized import (MFDepthwise, MFPointwise, PointwiseFactorization, block_rank_map,
                         compose_dense, grouped_to_dense, mf_pointwise_forward)
from .layers import Module
from .shiftmax import (DynamicShiftMax, HyperFunction, ShiftMaxConfig, dynamic_shift_max,
                       group_shift, hyper_coeffs, shift_max_cost, static_group_shift,
                       static_shift_matrix)
from .tensor import Tensor
from .train import kl_divergence, smoothed_ce


@dataclass
class Check:
    name: str
    passed: int
    total: int
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.passed == self.total


# ----------------------------------------------------------------------------
# oracles


def naive_shift_max(x: np.ndarray, a: np.ndarray, G: int) -> np.ndarray:
    """Reference loop over (n, k, i, j); ``a`` has shape (N, K, C, J)."""
    n_, C, H, W = x.shape
    _, K, _, J = a.shape
    step = C // G
    y = np.empty_like(x)
    for n in range(n_):
        for i in range(C):
            best = None
            for k in range(K):
                acc = a[n, k, i, 0] * x[n, i % C]
                for j in range(1, J):
                    acc = acc + a[n, k, i, j] * x[n, (i + j * step) % C]
                best = acc if best is None else np.where(acc > best, acc, best)
            y[n, i] = best
    return y


def dense_conv1x1(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    return np.einsum("oc,nchw->nohw", W, x)


# ----------------------------------------------------------------------------
# finite differences


def rel_error(analytic: np.ndarray, numeric: np.ndarray, eps: float = 1e-12) -> float:
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), eps))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-4,
                 kink_tol: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences of ``f`` w.r.t. ``arr`` (modified in place and restored).

    Returns the gradient and a boolean mask of coordinates whose step straddles
    a kink (central differences at h and h/2 disagree beyond ``kink_tol``).
    """
    g = np.zeros(arr.shape)
    kink = np.zeros(arr.shape, dtype=bool)
    flat, gf, kf = arr.reshape(-1), g.reshape(-1), kink.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for step in (h, -h, h / 2, -h / 2) if kink_tol is not None else (h, -h):
            flat[i] = orig + step
            vals.append(f())
        flat[i] = orig
        gf[i] = (vals[0] - vals[1]) / (2 * h)
        if kink_tol is not None:
            kf[i] = abs(gf[i] - (vals[2] - vals[3]) / h) > kink_tol
    return g, kink


# central differences at h and h/2 that disagree by more than this fraction of
# the gradient scale mark a step that crosses a max/ReLU breakpoint
KINK_RTOL = 1e-6


@dataclass
class GradResult:
    name: str
    max_rel: float
    excluded: int
    total: int


def gradcheck_fn(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                 seed: int = 0, h: float = 1e-4, detect_kinks: bool = False,
                 analytic_dtype=np.float64) -> GradResult:
    """Check gradients of ``sum(fn(*inputs) * R)`` for every input array.

    Numeric derivatives always use float64 copies; analytic derivatives use
    ``analytic_dtype``.
    """
    rng = np.random.default_rng(seed)
    xs64 = [np.array(x, dtype=np.float64) for x in inputs]
    out_shape = fn(*[Tensor(x) for x in xs64]).shape
    R = rng.standard_normal(out_shape)

    def f():
        with T.no_grad():
            return float((fn(*[Tensor(x) for x in xs64]).data * R).sum())

    ts = [Tensor(x.astype(analytic_dtype), requires_grad=True) for x in xs64]
    out = fn(*ts)
    out.backward(R.astype(analytic_dtype))
    worst, excluded, total = 0.0, 0, 0
    for t, x in zip(ts, xs64):
        ana = t.grad if t.grad is not None else np.zeros_like(x)
        tol = KINK_RTOL * max(np.abs(ana).max(), 1e-12) if detect_kinks else None
        num, kink = numeric_grad(f, x, h, tol)
        keep = ~kink
        excluded += int(kink.sum())
        total += x.size
        if keep.any():
            worst = max(worst, rel_error(ana[keep], num[keep]))
    return GradResult(name, worst, excluded, total)


def gradcheck_module(name: str, module: Module, x: np.ndarray, seed: int = 0,
                     h: float = 1e-4, analytic_dtype=np.float64,
                     detect_kinks: bool = True) -> GradResult:
    """Gradients of a module w.r.t. its input and all parameters.

    The module runs in float64 for the numeric side and in ``analytic_dtype``
    for the analytic side, starting from identical weights and buffers.
    """
    rng = np.random.default_rng(seed)
    module.astype(np.float64)
    state0 = {k: v.copy() for k, v in module.state_dict().items()}
    params = module.parameters()
    x64 = np.array(x, dtype=np.float64)

    def restore():
        module.load_state_dict({k: v.copy() for k, v in state0.items()})

    def run(inp):
        restore_buffers()
        return module(inp)

    buffers0 = {k: v.copy() for k, v in module.named_buffers()}

    def restore_buffers():
        for mname, m in module.named_modules():
            for bname in list(m._buffers):
                key = f"{mname}.{bname}" if mname else bname
                m._buffers[bname][...] = buffers0[key]

    with T.no_grad():
        R = rng.standard_normal(run(Tensor(x64)).shape)

    def f():
        with T.no_grad():
            return float((run(Tensor(x64)).data * R).sum())

    # analytic pass
    module.astype(analytic_dtype)
    restore_buffers()
    xt = Tensor(x64.astype(analytic_dtype), requires_grad=True)
    module.zero_grad()
    run(xt).backward(R.astype(analytic_dtype))
    grads = [xt.grad] + [p.grad for p in params]
    module.astype(np.float64)
    restore()

    worst, excluded, total = 0.0, 0, 0
    arrays = [x64] + [p.data for p in params]
    for a, g in zip(arrays, grads):
        g = np.zeros(a.shape) if g is None else np.asarray(g, np.float64)
        tol = KINK_RTOL * max(np.abs(g).max(), 1e-12) if detect_kinks else None
        n, kink = numeric_grad(f, a, h, tol)
        keep = ~kink
        excluded += int(kink.sum())
        total += a.size
        if keep.any():
            worst = max(worst, rel_error(g[keep], n[keep]))
    restore()
    return GradResult(name, worst, excluded, total)


# ----------------------------------------------------------------------------
# random configurations


def random_pointwise_config(rng: np.random.Generator, relaxed: bool = True):
    """(C_in, C_mid, C_out, G1, G2); with ``relaxed`` G1 * G2 == C_mid."""
    while True:
        g1, g2 = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        c_mid = g1 * g2 if relaxed else g1 * g2 * int(rng.integers(1, 3))
        c_in = g1 * int(rng.integers(1, 5))
        c_out = g2 * int(rng.integers(1, 5))
        if c_mid > 1:
            return c_in, c_mid, c_out, g1, g2


SHIFT_RANK2_PAIRS = ((4, 6), (6, 8), (8, 12), (10, 12), (12, 16))


# ----------------------------------------------------------------------------
# suites


def suite_rank(seeds: int = 50) -> List[Check]:
    rng = np.random.default_rng(1234)
    le1 = eq1 = 0
    for s in range(seeds):
        cfg = random_pointwise_config(np.random.default_rng(s))
        f = PointwiseFactorization.random(*cfg, rng)
        ranks = block_rank_map(compose_dense(f), cfg[3], cfg[4])
        le1 += int((ranks <= 1).all())
        eq1 += int((ranks == 1).all())
    two = 0
    for s in range(seeds):
        g1, g2 = SHIFT_RANK2_PAIRS[s % len(SHIFT_RANK2_PAIRS)]
        c_mid = g1 * g2
        f = PointwiseFactorization.random(c_mid, c_mid, c_mid, g1, g2,
                                          np.random.default_rng(100 + s))
        a = np.random.default_rng(200 + s).standard_normal((c_mid, 2))
        ranks = block_rank_map(compose_dense(f, static_shift_matrix(a, g1)), g1, g2)
        two += int((ranks == 2).all())
    return [Check("block rank <= 1", le1, seeds), Check("block rank == 1 (generic)", eq1, seeds),
            Check("block rank == 2 with static group shift", two, seeds)]


def suite_oracle(configs: int = 200, seeds: int = 50) -> List[Check]:
    worst, ok = 0.0, 0
    for s in range(configs):
        rng = np.random.default_rng(s)
        c_in, c_mid, c_out, g1, g2 = random_pointwise_config(rng, relaxed=False)
        f = PointwiseFactorization(
            c_in, c_mid, c_out, g1, g2,
            (rng.standard_normal((c_mid, c_in // g1)) / np.sqrt(c_in // g1)).astype(np.float32),
            (rng.standard_normal((c_out, c_mid // g2)) / np.sqrt(c_mid // g2)).astype(np.float32),
            np.arange(c_mid).reshape(g1, -1).T.ravel())
        x = rng.standard_normal((2, c_in, 3, 3)).astype(np.float32)
        y = mf_pointwise_forward(x, f).data
        ref = dense_conv1x1(x.astype(np.float64), compose_dense(f))
        d = float(np.abs(y - ref).max())
        worst = max(worst, d)
        ok += int(d < 1e-5)
    exact = 0
    for s in range(seeds):
        rng = np.random.default_rng(10_000 + s)
        C, G = 8, 4
        cfg = ShiftMaxConfig(C, G, 2, 2, r=4)
        x = rng.standard_normal((2, C, 2, 2))
        h = HyperFunction.random(cfg, rng)
        y = dynamic_shift_max(x, h, cfg).data
        a = hyper_coeffs(x, h, cfg).data
        exact += int(np.array_equal(y, naive_shift_max(x, a, G)))
    return [Check("factorized pointwise == composed dense (< 1e-5)", ok, configs,
                  f"max abs diff {worst:.2e}"),
            Check("dynamic shift-max == naive loop (exact)", exact, seeds)]


def _block_specs():
    arch = ArchSpec("check", [], r=4)
    return arch, [
        ("stem", build_stem(BlockSpec("stem", 3, 8, 4, 1, 2, 2), 3, seed=1), (2, 3, 6, 6)),
        ("micro-a", build_micro_a(BlockSpec("A", 3, 8, 4, 2, 0, 1), 4, arch, seed=2), (2, 4, 4, 4)),
        ("micro-b", build_micro_b(BlockSpec("B", 3, 8, 4, 2, 2, 2), 4, arch, seed=3), (2, 4, 4, 4)),
        ("micro-c", build_micro_c(BlockSpec("C", 3, 8, 4, 2, 2, 1), 8, arch, seed=4), (2, 8, 4, 4)),
    ]


def op_gradchecks(seed: int = 0) -> List[GradResult]:
    """Every differentiable kernel, double precision."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    pos = lambda *s: rng.uniform(0.5, 1.5, s)
    away = lambda *s: np.sign(r(*s)) * rng.uniform(0.1, 1.0, s)  # |x| >= 0.1, no kinks
    mask = rng.random((2, 3, 3, 3)) > 0.3
    res = [
        gradcheck_fn("conv2d", lambda x, w: T.conv2d(x, w, 1, 1), [r(2, 3, 5, 5), r(4, 3, 3, 3)]),
        gradcheck_fn("conv2d grouped strided", lambda x, w, b: T.conv2d(x, w, (2, 1), (1, 0), 2, b),
                     [r(2, 4, 5, 4), r(6, 2, 3, 1), r(6)]),
        gradcheck_fn("conv2d 1x1", lambda x, w: T.conv2d(x, w), [r(2, 4, 3, 3), r(5, 4, 1, 1)]),
        gradcheck_fn("depthwise_conv2d t=2", lambda x, w: T.depthwise_conv2d(x, w, 2, 1),
                     [r(1, 3, 5, 5), r(6, 1, 3, 3)]),
        gradcheck_fn("fully_connected", T.fully_connected, [r(3, 5), r(4, 5), r(4)]),
        gradcheck_fn("global_avg_pool", T.global_avg_pool, [r(2, 3, 4, 5)]),
        gradcheck_fn("batch_norm train",
                     lambda x, g, b: T.batch_norm(x, g, b, np.zeros(3), np.ones(3), True),
                     [r(4, 3, 2, 2), pos(3), r(3)]),
        gradcheck_fn("batch_norm eval",
                     lambda x, g, b: T.batch_norm(x, g, b, np.full(3, 0.2), np.full(3, 1.5), False),
                     [r(2, 3, 2, 2), pos(3), r(3)]),
        gradcheck_fn("relu", T.relu, [away(2, 3, 3)]),
        gradcheck_fn("sigmoid", T.sigmoid, [r(2, 5)]),
        gradcheck_fn("softmax", T.softmax, [r(3, 5)]),
        gradcheck_fn("log_softmax", T.log_softmax, [r(3, 5)]),
        gradcheck_fn("bilinear_upsample_x2", T.bilinear_upsample_x2, [r(1, 2, 3, 4)]),
        gradcheck_fn("add broadcast", T.add, [r(2, 3, 2, 2), r(1, 3, 1, 1)]),
        gradcheck_fn("mul broadcast", T.mul, [r(2, 3, 2, 2), r(1, 3, 1, 1)]),
        gradcheck_fn("channel_permute", lambda x: T.channel_permute(x, np.array([0, 2, 4, 1, 3, 5])),
                     [r(1, 6, 2, 2)]),
        gradcheck_fn("roll_channels", lambda x: T.roll_channels(x, 2), [r(1, 6, 2, 2)]),
        gradcheck_fn("dropout (fixed mask)",
                     lambda x: T.dropout(x, 0.3, np.random.default_rng(7), True),
                     [r(2, 3, 3, 3)]),
        gradcheck_fn("reshape+sum+mean", lambda x: T.mean(x.reshape(2, -1), 1) * 3.0,
                     [r(2, 3, 2)]),
        gradcheck_fn("shift_max_apply", lambda x, a: T.shift_max_apply(x, a, 2),
                     [r(2, 4, 2, 2), r(2, 2, 4, 2)], detect_kinks=True),
    ]
    labels = np.array([0, 2, 1])
    res.append(gradcheck_fn("smoothed_ce", lambda z: smoothed_ce(z, labels, 0.1), [r(3, 4)]))
    p = T.softmax(Tensor(r(3, 4)))
    res.append(gradcheck_fn("kl_divergence", lambda q: kl_divergence(p, q), [r(3, 4)]))
    return res


def block_gradchecks(analytic_dtype=np.float32, seed: int = 0) -> List[GradResult]:
    """Full blocks with shift-max activations, analytic gradients in ``analytic_dtype``."""
    _, blocks = _block_specs()
    out = []
    for i, (name, blk, shape) in enumerate(blocks):
        x = np.random.default_rng(seed + i).standard_normal(shape)
        out.append(gradcheck_module(name, blk, x, seed=seed + i, analytic_dtype=analytic_dtype))
    return out


def suite_grad() -> List[Check]:
    checks = []
    for r in op_gradchecks():
        checks.append(Check(f"grad {r.name} (float64 < 1e-6)", int(r.max_rel < 1e-6), 1,
                            f"max rel {r.max_rel:.2e}, excluded {r.excluded}/{r.total}"))
    for r in block_gradchecks(np.float64):
        checks.append(Check(f"grad {r.name} (float64 < 1e-6)", int(r.max_rel < 1e-6), 1,
                            f"max rel {r.max_rel:.2e}, excluded {r.excluded}/{r.total}"))
    for r in block_gradchecks(np.float32):
        checks.append(Check(f"grad {r.name} (float32 < 1e-3)", int(r.max_rel < 1e-3), 1,
                            f"max rel {r.max_rel:.2e}, excluded {r.excluded}/{r.total}"))
    return checks


def suite_shiftmax(seeds: int = 20) -> List[Check]:
    ident = relu = dyn = period = perm = cost = static = 0
    for s in range(seeds):
        rng = np.random.default_rng(s)
        x = rng.standard_normal((2, 6, 3, 3))
        n = 2
        a1 = np.ones((n, 1, 6, 1))
        ident += int(np.array_equal(T.shift_max_apply(Tensor(x), Tensor(a1), 3).data, x))
        a2 = np.concatenate([np.ones((n, 1, 6, 1)), np.zeros((n, 1, 6, 1))], axis=1)
        relu += int(np.array_equal(T.shift_max_apply(Tensor(x), Tensor(a2), 3).data,
                                   np.maximum(x, 0)))
        cfg = ShiftMaxConfig(6, 3, J=1, K=2, r=2)
        h = HyperFunction.random(cfg, rng)
        a = hyper_coeffs(x, h, cfg).data  # (N, 2, C, 1)
        ref = np.maximum(a[:, 0, :, 0, None, None] * x, a[:, 1, :, 0, None, None] * x)
        dyn += int(np.array_equal(dynamic_shift_max(x, h, cfg).data, ref))
        period += int(np.array_equal(group_shift(x, 3, 3).data, x)
                      and np.array_equal(group_shift(x, 1, 3).data[:, 0], x[:, 2]))
        cfg2 = ShiftMaxConfig(6, 3, J=2, K=3, r=2)
        h2 = HyperFunction.random(cfg2, rng)
        a3 = hyper_coeffs(x, h2, cfg2).data
        order = rng.permutation(3)
        perm += int(np.array_equal(T.shift_max_apply(Tensor(x), Tensor(a3), 3).data,
                                   T.shift_max_apply(Tensor(x), Tensor(a3[:, order]), 3).data))
        C = int(rng.integers(1, 9)) * 4
        G = int(rng.choice([1, 2, 4]))
        cfg3 = ShiftMaxConfig(C, G, J=int(rng.integers(1, G + 1)), K=int(rng.integers(1, 4)),
                              r=int(rng.choice([1, 2, 4])))
        H, W = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        c = count_layer(DynamicShiftMax(cfg3), (1, C, H, W))
        cost += int(c.madds + c.adds == shift_max_cost(cfg3, H, W))
        st = rng.standard_normal((6, 2))
        y = static_group_shift(x, st, 3).data
        static += int(np.allclose(y, np.einsum("ij,njhw->nihw", static_shift_matrix(st, 3), x),
                                  atol=1e-12))
    return [Check("J=1,K=1,a=1 is identity", ident, seeds),
            Check("J=1,K=2,a=(1,0) is ReLU", relu, seeds),
            Check("J=1 dynamic is max(a1 x, a2 x)", dyn, seeds),
            Check("group_shift has period G", period, seeds),
            Check("max over k is permutation invariant", perm, seeds),
            Check("accounted cost == shift_max_cost", cost, seeds),
            Check("static shift == diagonal + shifted diagonal", static, seeds)]


def suite_cost(configs: int = 100) -> List[Check]:
    """Accounted layer costs against the closed forms, as exact integers."""
    pw = dw = sm = 0
    for s in range(configs):
        rng = np.random.default_rng(50_000 + s)
        G = int(rng.integers(1, 9))
        R = int(rng.choice([1, 2, 4, 8]))
        C = G * R * int(rng.integers(1, 5)) * G
        H, W = int(rng.integers(1, 16)), int(rng.integers(1, 16))
        c = count_layer(MFPointwise(C, C // R, C, G, G), (1, C, H, W))
        pw += int(c.madds * R * G == 2 * C * C * H * W)
        k = int(rng.choice([3, 5, 7]))
        t = int(rng.integers(1, 7))
        stride = int(rng.integers(1, 3))
        c = count_layer(MFDepthwise(C, k, t, stride), (1, C, H, W))
        ho = (H + 2 * (k // 2) - k) // stride + 1
        wo = (W + 2 * (k // 2) - k) // stride + 1
        expect = mf_depthwise_madds(ho, W, wo, k, k, C, t)
        dw += int(c.madds == expect and (stride > 1 or c.madds == H * W * C * t * (k + k)))
        cfg = ShiftMaxConfig(C, G, J=int(rng.integers(1, G + 1)), K=int(rng.integers(1, 4)),
                             r=int(rng.choice([1, 2, 4, 16])))
        c = count_layer(DynamicShiftMax(cfg), (1, C, H, W))
        hid = cfg.hidden
        jk = cfg.J * cfg.K
        terms = C * hid + hid * C * jk + H * W * C * jk
        sm += int(c.madds == terms and c.adds == H * W * C
                  and c.madds + c.adds == shift_max_cost(cfg, H, W))
    return [Check("pointwise pair == 2C^2/(RG) per location", pw, configs),
            Check("depthwise pair == (kh + kw) form", dw, configs),
            Check("shift-max == pool + two FC + mixing terms", sm, configs)]


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "rank": suite_rank,
    "oracle": suite_oracle,
    "grad": suite_grad,
    "shiftmax": suite_shiftmax,
    "cost": suite_cost,
}


def run_suite(name: str) -> List[Check]:
    if name == "all":
        return [c for n in SUITES for c in SUITES[n]()]
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join([*SUITES, 'all'])}")
    return SUITES[name]()
