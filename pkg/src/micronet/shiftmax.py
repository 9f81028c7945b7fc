"""Dynamic Shift-Max activation.

For channel ``i`` the activation fuses ``J`` circularly shifted copies of the
input (shift step ``C/G``) with input-dependent coefficients and takes the
maximum over ``K`` such fusions. Coefficients come from a two-layer
hyper-function on the globally pooled input and are spatially shared.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import Linear, Module, Parameter
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class ShiftMaxConfig:
    C: int
    G: int
    J: int = 2
    K: int = 2
    r: int = 4
    gamma: float = 0.5
    min_hidden: int = 1
    theta: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.G < 1 or self.C % self.G:
            raise ConfigError(f"G={self.G} must divide C={self.C}")
        if not 1 <= self.J <= self.G:
            raise ConfigError(f"J={self.J} must lie in [1, G={self.G}]")
        if self.K < 1 or self.r < 1:
            raise ConfigError("K and r must be >= 1")
        if self.theta is None:
            self.theta = default_theta(self.C, self.J, self.K)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.K, self.C, self.J):
            raise ShapeError(f"theta must have shape (K, C, J)={(self.K, self.C, self.J)}")

    @property
    def hidden(self) -> int:
        """Width of the hyper-function bottleneck."""
        return max(self.min_hidden, self.C // self.r)


def default_theta(C: int, J: int, K: int) -> np.ndarray:
    """Branch 0 passes the unshifted input; every other coefficient starts at 0."""
    theta = np.zeros((K, C, J))
    theta[0, :, 0] = 1.0
    return theta


def group_shift(x, j: int, G: int) -> Tensor:
    """Channel i of the result is channel (i + j*C/G) mod C of ``x``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    C = x.shape[1]
    if G < 1 or C % G:
        raise ConfigError(f"G={G} must divide C={C}")
    if j < 0:
        raise ConfigError("shift index j must be >= 0")
    return T.roll_channels(x, (j * (C // G)) % C)


@dataclass
class HyperFunction:
    w1: np.ndarray  # (hidden, C)
    b1: np.ndarray
    w2: np.ndarray  # (K*C*J, hidden), output laid out as (K, C, J)
    b2: np.ndarray

    @classmethod
    def random(cls, cfg: ShiftMaxConfig, rng: np.random.Generator, dtype=np.float64,
               scale: float = 1.0) -> "HyperFunction":
        h, n = cfg.hidden, cfg.K * cfg.C * cfg.J
        return cls(scale * rng.standard_normal((h, cfg.C)).astype(dtype),
                   scale * rng.standard_normal(h).astype(dtype),
                   scale * rng.standard_normal((n, h)).astype(dtype),
                   scale * rng.standard_normal(n).astype(dtype))

    @classmethod
    def zeros(cls, cfg: ShiftMaxConfig, dtype=np.float64) -> "HyperFunction":
        h, n = cfg.hidden, cfg.K * cfg.C * cfg.J
        return cls(np.zeros((h, cfg.C), dtype), np.zeros(h, dtype),
                   np.zeros((n, h), dtype), np.zeros(n, dtype))


def _coeffs(x: Tensor, w1, b1, w2, b2, theta: np.ndarray, gamma: float, K: int, J: int) -> Tensor:
    n, c = x.shape[:2]
    pooled = T.global_avg_pool(x).reshape(n, c)
    z = T.fully_connected(T.relu(T.fully_connected(pooled, w1, b1)), w2, b2)
    resid = T.sigmoid(z) * (2.0 * gamma) - gamma
    return T.add(resid.reshape(n, K, c, J), Tensor(theta.astype(x.dtype)[None]))


def hyper_coeffs(x, h: HyperFunction, cfg: ShiftMaxConfig) -> Tensor:
    """Coefficients a[n, k, i, j] = theta + gamma * (2 sigmoid(z) - 1)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[1] != cfg.C:
        raise ShapeError(f"input has {x.shape[1]} channels, config expects {cfg.C}")
    dt = x.dtype
    return _coeffs(x, Tensor(h.w1.astype(dt)), Tensor(h.b1.astype(dt)), Tensor(h.w2.astype(dt)),
                   Tensor(h.b2.astype(dt)), cfg.theta, cfg.gamma, cfg.K, cfg.J)


def dynamic_shift_max(x, h: HyperFunction, cfg: ShiftMaxConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return T.shift_max_apply(x, hyper_coeffs(x, h, cfg), cfg.G)


def static_group_shift(x, a: np.ndarray, G: int) -> Tensor:
    """y_i = a[i, 0] x_i + a[i, 1] x_{(i + C/G) mod C} with constant ``a`` of shape (C, 2)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    C = x.shape[1]
    a = np.asarray(a)
    if a.shape != (C, 2):
        raise ShapeError(f"coefficients must have shape ({C}, 2)")
    coeffs = np.broadcast_to(a.astype(x.dtype), (x.shape[0], 1, C, 2)).copy()
    return T.shift_max_apply(x, Tensor(coeffs), G)


def static_shift_matrix(a: np.ndarray, G: int) -> np.ndarray:
    """C x C channel matrix of the static group shift: diagonal plus shifted diagonal."""
    a = np.asarray(a, dtype=np.float64)
    C = a.shape[0]
    if G < 1 or C % G:
        raise ConfigError(f"G={G} must divide C={C}")
    idx = np.arange(C)
    m = np.zeros((C, C))
    m[idx, idx] += a[:, 0]
    m[idx, (idx + C // G) % C] += a[:, 1]
    return m


def shift_max_cost(cfg: ShiftMaxConfig, H: int, W: int) -> int:
    """Pooling adds + coefficient generation + application."""
    C, s, JK = cfg.C, cfg.hidden, cfg.J * cfg.K
    return H * W * C + C * s + s * C * JK + H * W * C * JK


class DynamicShiftMax(Module):
    def __init__(self, cfg: ShiftMaxConfig, rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cfg = cfg
        rng = rng or np.random.default_rng(0)
        self.fc1 = Linear(cfg.C, cfg.hidden, rng=rng)
        self.fc2 = Linear(cfg.hidden, cfg.K * cfg.C * cfg.J, rng=rng)
        # start close to the base coefficients
        self.fc2.weight.data *= 0.1
        self.register_buffer("theta", cfg.theta.astype(np.float32))

    def coeffs(self, x: Tensor) -> Tensor:
        c = self.cfg
        return _coeffs(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias,
                       self.theta, c.gamma, c.K, c.J)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.C:
            raise ShapeError(f"input has {x.shape[1]} channels, activation expects {self.cfg.C}")
        return T.shift_max_apply(x, self.coeffs(x), self.cfg.G)

    def hyper(self) -> HyperFunction:
        return HyperFunction(self.fc1.weight.data, self.fc1.bias.data,
                             self.fc2.weight.data, self.fc2.bias.data)

    def __repr__(self):
        c = self.cfg
        return f"DynamicShiftMax(C={c.C}, G={c.G}, J={c.J}, K={c.K}, hidden={c.hidden})"
