import numpy as np
import pytest

from micronet import tensor as T
from micronet.accounting import count_layer
from micronet.factorized import PointwiseFactorization, block_rank_map, compose_dense
from micronet.shiftmax import (DynamicShiftMax, HyperFunction, ShiftMaxConfig, default_theta,
                               dynamic_shift_max, group_shift, hyper_coeffs, shift_max_cost,
                               static_group_shift, static_shift_matrix)
from micronet.tensor import ConfigError, ShapeError, Tensor
from micronet.verify import SHIFT_RANK2_PAIRS, gradcheck_module, naive_shift_max


class TestGroupShift:
    def test_zero_is_identity(self, rng):
        x = rng.standard_normal((1, 6, 2, 2))
        assert np.array_equal(group_shift(x, 0, 3).data, x)

    def test_example(self, rng):
        x = rng.standard_normal((1, 6, 2, 2))
        y = group_shift(x, 1, 3).data
        assert np.array_equal(y[:, 0], x[:, 2])
        assert np.array_equal(y[:, 5], x[:, 1])

    @pytest.mark.parametrize("C,G", [(6, 3), (8, 4), (12, 2), (9, 9)])
    def test_period(self, rng, C, G):
        x = rng.standard_normal((2, C, 2, 3))
        assert np.array_equal(group_shift(x, G, G).data, x)
        y = x
        for _ in range(G):
            y = group_shift(y, 1, G).data
        assert np.array_equal(y, x)

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            group_shift(np.zeros((1, 6, 1, 1)), 1, 4)


class TestConfig:
    def test_defaults(self):
        cfg = ShiftMaxConfig(8, 2)
        assert (cfg.J, cfg.K, cfg.gamma) == (2, 2, 0.5)
        assert np.array_equal(cfg.theta, default_theta(8, 2, 2))
        assert cfg.theta[0, :, 0].tolist() == [1.0] * 8 and cfg.theta.sum() == 8

    @pytest.mark.parametrize("kwargs", [dict(C=6, G=4), dict(C=6, G=3, J=4), dict(C=6, G=3, K=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ShiftMaxConfig(**kwargs)


class TestCoefficients:
    def test_zero_hyper_gives_theta(self, rng):
        cfg = ShiftMaxConfig(8, 4, r=4)
        h = HyperFunction.random(cfg, rng)
        h.w2[:] = 0
        h.b2[:] = 0
        a = hyper_coeffs(rng.standard_normal((3, 8, 2, 2)), h, cfg).data
        assert np.array_equal(a, np.broadcast_to(cfg.theta, a.shape))

    def test_range(self, rng):
        cfg = ShiftMaxConfig(8, 4, r=2, gamma=0.3)
        h = HyperFunction.random(cfg, rng, scale=3.0)
        a = hyper_coeffs(5 * rng.standard_normal((4, 8, 3, 3)), h, cfg).data
        assert (a >= cfg.theta - cfg.gamma).all() and (a <= cfg.theta + cfg.gamma).all()

    def test_generation_madds(self, rng):
        cfg = ShiftMaxConfig(16, 4, J=2, K=2, r=4)
        h = HyperFunction.random(cfg, rng)
        with T.count_madds() as c:
            hyper_coeffs(rng.standard_normal((1, 16, 1, 1)), h, cfg)
        assert c[0] == 16 * 4 + 4 * 16 * 2 * 2


class TestDynamicShiftMax:
    def test_identity(self, rng):
        cfg = ShiftMaxConfig(4, 2, J=1, K=1, gamma=0.0, theta=np.ones((1, 4, 1)))
        x = rng.standard_normal((2, 4, 3, 3))
        assert np.array_equal(dynamic_shift_max(x, HyperFunction.random(cfg, rng), cfg).data, x)

    def test_relu(self, rng):
        theta = np.zeros((2, 4, 1))
        theta[0] = 1
        cfg = ShiftMaxConfig(4, 2, J=1, K=2, gamma=0.0, theta=theta)
        x = rng.standard_normal((2, 4, 3, 3))
        y = dynamic_shift_max(x, HyperFunction.random(cfg, rng), cfg).data
        assert np.array_equal(y, np.maximum(x, 0))

    def test_dynamic_relu_form(self, rng):
        cfg = ShiftMaxConfig(6, 3, J=1, K=2, r=2)
        h = HyperFunction.random(cfg, rng)
        x = rng.standard_normal((3, 6, 2, 2))
        a = hyper_coeffs(x, h, cfg).data[..., 0]
        ref = np.maximum(a[:, 0, :, None, None] * x, a[:, 1, :, None, None] * x)
        assert np.array_equal(dynamic_shift_max(x, h, cfg).data, ref)

    @pytest.mark.parametrize("seed", range(10))
    def test_naive_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cfg = ShiftMaxConfig(8, 4, J=2, K=2, r=4)
        h = HyperFunction.random(cfg, rng)
        x = rng.standard_normal((1, 8, 2, 2))
        a = hyper_coeffs(x, h, cfg).data
        assert np.array_equal(dynamic_shift_max(x, h, cfg).data, naive_shift_max(x, a, 4))

    def test_branch_permutation_invariance(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 3, 3)))
        a = rng.standard_normal((2, 4, 6, 2))
        y = T.shift_max_apply(x, Tensor(a), 3).data
        assert np.array_equal(y, T.shift_max_apply(x, Tensor(a[:, ::-1].copy()), 3).data)

    def test_piecewise_linear_breakpoint_at_zero(self, rng):
        a = np.empty((1, 2, 1, 1))
        a[0, :, 0, 0] = [1.3, -0.4]
        xs = np.linspace(-2, 2, 41).reshape(1, 1, 1, 41)
        y = T.shift_max_apply(Tensor(xs), Tensor(a), 1).data.ravel()
        ref = np.where(xs.ravel() >= 0, 1.3, -0.4) * xs.ravel()
        assert np.allclose(y, ref, atol=1e-15)

    def test_shape_error(self, rng):
        cfg = ShiftMaxConfig(8, 4)
        with pytest.raises(ShapeError):
            dynamic_shift_max(np.zeros((1, 6, 2, 2)), HyperFunction.zeros(cfg), cfg)

    def test_module_gradients(self, rng):
        m = DynamicShiftMax(ShiftMaxConfig(6, 3, r=2), rng)
        r = gradcheck_module("shift-max", m, rng.standard_normal((2, 6, 3, 3)),
                             analytic_dtype=np.float32)
        assert r.max_rel < 1e-3
        assert r.excluded <= 0.05 * r.total


class TestStaticShift:
    def test_identity(self, rng):
        x = rng.standard_normal((1, 6, 2, 2))
        a = np.column_stack([np.ones(6), np.zeros(6)])
        assert np.array_equal(static_group_shift(x, a, 3).data, x)

    def test_matrix_form(self, rng):
        a = rng.standard_normal((6, 2))
        m = static_shift_matrix(a, 3)
        assert np.array_equal(np.diag(m), a[:, 0])
        assert all(m[i, (i + 2) % 6] == a[i, 1] for i in range(6))
        assert np.count_nonzero(m) == 12
        x = rng.standard_normal((2, 6, 2, 2))
        assert np.allclose(static_group_shift(x, a, 3).data,
                           np.einsum("ij,njhw->nihw", m, x), atol=1e-12)

    def test_linear(self, rng):
        a = rng.standard_normal((6, 2))
        x, z = rng.standard_normal((2, 1, 6, 2, 2))
        f = lambda v: static_group_shift(v, a, 3).data
        assert np.allclose(f(2 * x + 3 * z), 2 * f(x) + 3 * f(z), atol=1e-12)

    @pytest.mark.parametrize("g1,g2", SHIFT_RANK2_PAIRS)
    def test_raises_block_rank_to_two(self, g1, g2):
        rng = np.random.default_rng(g1 * 100 + g2)
        c = g1 * g2
        f = PointwiseFactorization.random(c, c, c, g1, g2, rng)
        assert (block_rank_map(compose_dense(f), g1, g2) == 1).all()
        mid = static_shift_matrix(rng.standard_normal((c, 2)), g1)
        assert (block_rank_map(compose_dense(f, mid), g1, g2) == 2).all()

    def test_square_grid_keeps_rank_one(self):
        # with G1 == G2 the shift step C_mid/G1 is a multiple of G1, so a shifted
        # channel lands in the same producer group and no block gains rank
        rng = np.random.default_rng(0)
        f = PointwiseFactorization.random(18, 9, 18, 3, 3, rng)
        mid = static_shift_matrix(rng.standard_normal((9, 2)), 3)
        assert (block_rank_map(compose_dense(f, mid), 3, 3) == 1).all()


class TestCost:
    def test_example(self):
        assert shift_max_cost(ShiftMaxConfig(64, 4, 2, 2, r=4), 14, 14) == 67_840

    def test_se_like(self):
        cfg = ShiftMaxConfig(8, 1, J=1, K=1, r=2)
        assert shift_max_cost(cfg, 3, 3) == 9 * 8 + 8 * 4 + 4 * 8 + 9 * 8

    def test_monotone(self):
        base = shift_max_cost(ShiftMaxConfig(16, 4, 2, 2, r=4), 5, 5)
        assert shift_max_cost(ShiftMaxConfig(16, 4, 3, 2, r=4), 5, 5) > base
        assert shift_max_cost(ShiftMaxConfig(16, 4, 2, 3, r=4), 5, 5) > base
        assert shift_max_cost(ShiftMaxConfig(32, 4, 2, 2, r=4), 5, 5) > base
        assert shift_max_cost(ShiftMaxConfig(16, 4, 2, 2, r=4), 6, 5) > base
        assert shift_max_cost(ShiftMaxConfig(16, 4, 2, 2, r=4), 5, 6) > base

    @pytest.mark.parametrize("C,G,J,K,r,H,W", [(64, 4, 2, 2, 4, 14, 14), (12, 3, 3, 1, 2, 7, 5),
                                               (96, 8, 2, 2, 16, 28, 28)])
    def test_matches_accounting(self, C, G, J, K, r, H, W):
        cfg = ShiftMaxConfig(C, G, J, K, r)
        c = count_layer(DynamicShiftMax(cfg), (1, C, H, W))
        assert c.madds + c.adds == shift_max_cost(cfg, H, W)
        assert c.adds == H * W * C
