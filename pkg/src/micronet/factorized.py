"""Micro-factorized pointwise and depthwise convolutions.

A pointwise (1x1) convolution ``W`` of size ``C_out x C_in`` is replaced by
``P @ Phi @ Q^T``: a grouped squeeze to ``C_mid`` channels (``G1`` groups), a
fixed channel shuffle ``Phi`` and a grouped expansion (``G2`` groups). A k x k
depthwise kernel is replaced by a k x 1 kernel followed by a 1 x k kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .layers import ChannelShuffle, Conv2d, Module
from .tensor import ConfigError, ShapeError, Tensor


def adaptive_group_count(C: int, R: int, lam: float = 1.0) -> float:
    """Group count that balances channel count against connectivity."""
    if C <= 0 or R < 1:
        raise ConfigError(f"need C > 0 and R >= 1, got C={C}, R={R}")
    if C % R:
        raise ConfigError(f"C={C} is not divisible by R={R}")
    return lam * math.sqrt(C // R)


def _divisors(n: int) -> List[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


def relax_group_pair(C_in: int, C_mid: int, C_out: int) -> Tuple[int, int]:
    """Integer pair with G1 * G2 == C_mid closest to the square root split.

    G1 must divide C_in and G2 must divide C_out. Ties go to the smaller G1.
    """
    best = None
    for g1 in _divisors(C_mid):
        g2 = C_mid // g1
        if C_in % g1 or C_out % g2:
            continue
        key = (abs(g1 - g2), g1)
        if best is None or key < best[0]:
            best = (key, (g1, g2))
    if best is None:
        raise ConfigError(f"no divisor pair of C_mid={C_mid} fits C_in={C_in}, C_out={C_out}")
    return best[1]


def channel_shuffle_perm(C_mid: int, G1: int) -> np.ndarray:
    """pi with output[i] = input[pi[i]], interleaving the G1 producer groups."""
    if G1 < 1 or C_mid % G1:
        raise ConfigError(f"G1={G1} must divide C_mid={C_mid}")
    return np.arange(C_mid).reshape(G1, C_mid // G1).T.ravel()


def grouped_to_dense(w: np.ndarray, groups: int) -> np.ndarray:
    """Expand grouped 1x1 weights (C_out, C_in/groups) to a dense C_out x C_in matrix."""
    w = np.asarray(w).reshape(w.shape[0], -1)
    c_out, cg = w.shape
    if c_out % groups:
        raise ConfigError(f"groups={groups} must divide C_out={c_out}")
    og = c_out // groups
    dense = np.zeros((c_out, cg * groups), dtype=np.float64)
    for g in range(groups):
        dense[g * og:(g + 1) * og, g * cg:(g + 1) * cg] = w[g * og:(g + 1) * og]
    return dense


def perm_matrix(perm: np.ndarray) -> np.ndarray:
    n = len(perm)
    m = np.zeros((n, n))
    m[np.arange(n), perm] = 1.0
    return m


@dataclass
class PointwiseFactorization:
    C_in: int
    C_mid: int
    C_out: int
    G1: int
    G2: int
    Q: np.ndarray  # (C_mid, C_in // G1)
    P: np.ndarray  # (C_out, C_mid // G2)
    shuffle: np.ndarray

    def __post_init__(self):
        if self.C_in % self.G1 or self.C_mid % self.G1:
            raise ConfigError(f"G1={self.G1} must divide C_in={self.C_in} and C_mid={self.C_mid}")
        if self.C_mid % self.G2 or self.C_out % self.G2:
            raise ConfigError(f"G2={self.G2} must divide C_mid={self.C_mid} and C_out={self.C_out}")
        if self.Q.shape != (self.C_mid, self.C_in // self.G1):
            raise ShapeError(f"Q has shape {self.Q.shape}")
        if self.P.shape != (self.C_out, self.C_mid // self.G2):
            raise ShapeError(f"P has shape {self.P.shape}")
        if sorted(self.shuffle.tolist()) != list(range(self.C_mid)):
            raise ConfigError("shuffle is not a permutation of the mid channels")

    @property
    def R(self) -> float:
        return self.C_in / self.C_mid

    @classmethod
    def random(cls, C_in, C_mid, C_out, G1, G2, rng: np.random.Generator,
               dtype=np.float64) -> "PointwiseFactorization":
        return cls(C_in, C_mid, C_out, G1, G2,
                   rng.standard_normal((C_mid, C_in // G1)).astype(dtype),
                   rng.standard_normal((C_out, C_mid // G2)).astype(dtype),
                   channel_shuffle_perm(C_mid, G1))

    @classmethod
    def identity(cls, C: int, G: int) -> "PointwiseFactorization":
        """Unit diagonal blocks for Q and P with an identity shuffle."""
        if C % G:
            raise ConfigError(f"G={G} must divide C={C}")
        block = np.tile(np.eye(C // G), (G, 1))
        return cls(C, C, C, G, G, block.copy(), block.copy(), np.arange(C))

    def madds_per_location(self) -> int:
        return self.C_in * self.C_mid // self.G1 + self.C_mid * self.C_out // self.G2


def mf_pointwise_forward(x, f: PointwiseFactorization) -> Tensor:
    """Grouped squeeze, shuffle, grouped expand."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != f.C_in:
        raise ShapeError(f"input has {x.shape[1]} channels, factorization expects {f.C_in}")
    q = Tensor(f.Q.reshape(f.C_mid, -1, 1, 1).astype(x.dtype))
    p = Tensor(f.P.reshape(f.C_out, -1, 1, 1).astype(x.dtype))
    y = T.conv2d(x, q, groups=f.G1)
    y = T.channel_permute(y, f.shuffle)
    return T.conv2d(y, p, groups=f.G2)


def compose_dense(f: PointwiseFactorization, mid: Optional[np.ndarray] = None) -> np.ndarray:
    """Dense C_out x C_in matrix equal to the factorized map.

    ``mid`` is an optional C_mid x C_mid channel map applied after the shuffle.
    """
    W = perm_matrix(f.shuffle) @ grouped_to_dense(f.Q, f.G1)
    if mid is not None:
        W = np.asarray(mid, dtype=np.float64) @ W
    return grouped_to_dense(f.P, f.G2) @ W


def block_rank_map(W: np.ndarray, G1: int, G2: int, rtol: float = 1e-6) -> np.ndarray:
    """Numerical rank of each block; rows split into G2 groups, columns into G1."""
    W = np.asarray(W, dtype=np.float64)
    rows, cols = W.shape
    if rows % G2 or cols % G1:
        raise ConfigError(f"{rows}x{cols} matrix does not split into a {G2}x{G1} grid")
    rb, cb = rows // G2, cols // G1
    ranks = np.zeros((G2, G1), dtype=int)
    for i in range(G2):
        for j in range(G1):
            s = np.linalg.svd(W[i * rb:(i + 1) * rb, j * cb:(j + 1) * cb], compute_uv=False)
            if s.size and s[0] > 0:
                ranks[i, j] = int((s > rtol * s[0]).sum())
    return ranks


@dataclass
class DepthwiseFactorization:
    k: int
    channels: int
    t: int
    vertical: np.ndarray  # (channels * t, 1, k, 1)
    horizontal: np.ndarray  # (channels * t, 1, 1, k)

    def __post_init__(self):
        ct = self.channels * self.t
        if self.t < 1:
            raise ConfigError("multiplier t must be >= 1")
        if self.vertical.shape != (ct, 1, self.k, 1) or self.horizontal.shape != (ct, 1, 1, self.k):
            raise ShapeError("kernel shapes do not match k, channels and t")

    @property
    def out_channels(self) -> int:
        return self.channels * self.t

    @classmethod
    def random(cls, k, channels, t, rng, dtype=np.float64) -> "DepthwiseFactorization":
        ct = channels * t
        return cls(k, channels, t, rng.standard_normal((ct, 1, k, 1)).astype(dtype),
                   rng.standard_normal((ct, 1, 1, k)).astype(dtype))

    def full_kernel(self) -> np.ndarray:
        """Equivalent k x k kernels, the outer product of each vertical/horizontal pair."""
        return self.vertical[:, :, :, 0:1] * self.horizontal[:, :, 0:1, :]


def mf_depthwise_forward(x, d: DepthwiseFactorization, stride: int = 1) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != d.channels:
        raise ShapeError(f"input has {x.shape[1]} channels, factorization expects {d.channels}")
    p = d.k // 2
    y = T.conv2d(x, Tensor(d.vertical.astype(x.dtype)), (stride, 1), (p, 0), d.channels)
    return T.conv2d(y, Tensor(d.horizontal.astype(x.dtype)), (1, stride), (0, p), d.out_channels)


@dataclass(frozen=True)
class TradeoffPoint:
    G: float
    C: float
    E: float
    O: float
    R: float
    intercept: bool = False


def intercept_group(O: float, R: float) -> float:
    """Group count where channel count and connectivity coincide."""
    return (O / (2.0 * R)) ** (1.0 / 3.0)


def tradeoff_curve(O: float, R: float, G_values: Sequence[float],
                   rtol: float = 1e-9) -> List[TradeoffPoint]:
    """Channel count and connectivity for each group count at a fixed budget."""
    pts = []
    for G in G_values:
        C = math.sqrt(O * R * G / 2.0)
        E = O / (2.0 * G)
        pts.append(TradeoffPoint(G, C, E, O, R, abs(C - E) <= rtol * max(C, E)))
    return pts


class MFPointwise(Module):
    """Trainable micro-factorized pointwise convolution (no normalization)."""

    def __init__(self, c_in, c_mid, c_out, g1, g2, rng=None):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_mid, 1, groups=g1, rng=rng)
        self.shuffle = ChannelShuffle(channel_shuffle_perm(c_mid, g1))
        self.conv2 = Conv2d(c_mid, c_out, 1, groups=g2, rng=rng)

    def forward(self, x):
        return self.conv2(self.shuffle(self.conv1(x)))

    def trace(self, shape, prefix, out):
        for n in ("conv1", "shuffle", "conv2"):
            shape = getattr(self, n).trace(shape, f"{prefix}.{n}", out)
        return shape

    def factorization(self) -> PointwiseFactorization:
        c1, c2 = self.conv1, self.conv2
        return PointwiseFactorization(
            c1.c_in, c1.c_out, c2.c_out, c1.groups, c2.groups,
            c1.weight.data.reshape(c1.c_out, -1).astype(np.float64),
            c2.weight.data.reshape(c2.c_out, -1).astype(np.float64), self.shuffle.perm)


class MFDepthwise(Module):
    """k x 1 depthwise (expanding by t, stride along rows) then 1 x k depthwise
    (stride along columns)."""

    def __init__(self, c: int, k: int, t: int = 1, stride: int = 1, rng=None):
        super().__init__()
        if t < 1:
            raise ConfigError("multiplier t must be >= 1")
        self.c, self.k, self.t, self.s = c, k, t, stride
        self.conv_v = Conv2d(c, c * t, (k, 1), (stride, 1), (k // 2, 0), groups=c, rng=rng)
        self.conv_h = Conv2d(c * t, c * t, (1, k), (1, stride), (0, k // 2), groups=c * t, rng=rng)

    def forward(self, x):
        return self.conv_h(self.conv_v(x))

    def trace(self, shape, prefix, out):
        shape = self.conv_v.trace(shape, f"{prefix}.conv_v", out)
        return self.conv_h.trace(shape, f"{prefix}.conv_h", out)

    def factorization(self) -> DepthwiseFactorization:
        return DepthwiseFactorization(self.k, self.c, self.t,
                                      self.conv_v.weight.data.astype(np.float64),
                                      self.conv_h.weight.data.astype(np.float64))
