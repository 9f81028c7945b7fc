import math

import numpy as np
import pytest

from micronet import factorized as F
from micronet import tensor as T
from micronet.accounting import count_layer, mf_depthwise_madds
from micronet.tensor import ConfigError, ShapeError, Tensor
from micronet.verify import dense_conv1x1, random_pointwise_config


class TestGroupCount:
    @pytest.mark.parametrize("C,R,expected", [(18, 2, 3.0), (4, 4, 1.0), (288, 6, math.sqrt(48))])
    def test_values(self, C, R, expected):
        assert F.adaptive_group_count(C, R) == pytest.approx(expected, abs=1e-12)

    def test_lambda_scales(self):
        assert F.adaptive_group_count(18, 2, lam=2.0) == 6.0

    def test_non_divisible(self):
        with pytest.raises(ConfigError):
            F.adaptive_group_count(10, 3)

    @pytest.mark.parametrize("args,expected", [((64, 24, 144), (4, 6)), ((9, 9, 9), (3, 3)),
                                               ((192, 48, 192), (6, 8))])
    def test_relax_pair(self, args, expected):
        assert F.relax_group_pair(*args) == expected

    def test_relax_pair_impossible(self):
        # C_mid=7 only splits as 1x7 or 7x1; neither fits C_in=2, C_out=3
        with pytest.raises(ConfigError):
            F.relax_group_pair(2, 7, 3)


class TestShuffle:
    def test_example(self):
        assert F.channel_shuffle_perm(6, 3).tolist() == [0, 2, 4, 1, 3, 5]

    def test_g1_identity(self):
        assert F.channel_shuffle_perm(7, 1).tolist() == list(range(7))

    @pytest.mark.parametrize("c,g", [(6, 2), (12, 3), (24, 4), (48, 6)])
    def test_bijection_and_inverse(self, c, g):
        p = F.channel_shuffle_perm(c, g)
        assert sorted(p.tolist()) == list(range(c))
        inv = np.argsort(p)
        assert np.array_equal(p[inv], np.arange(c))
        # the inverse is the transposed shuffle
        assert np.array_equal(inv, F.channel_shuffle_perm(c, c // g))

    def test_formula(self):
        c, g = 12, 4
        p = F.channel_shuffle_perm(c, g)
        assert all(p[i] == (i % g) * (c // g) + i // g for i in range(c))

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            F.channel_shuffle_perm(10, 3)


class TestPointwise:
    def test_identity_factors(self, rng):
        f = F.PointwiseFactorization.identity(12, 3)
        x = rng.standard_normal((1, 12, 2, 2))
        assert np.array_equal(F.mf_pointwise_forward(x, f).data, x)
        assert np.array_equal(F.compose_dense(f), np.eye(12))

    def test_dense_oracle_example(self, rng):
        f = F.PointwiseFactorization.random(18, 9, 18, 3, 3, rng, dtype=np.float32)
        x = rng.standard_normal((2, 18, 4, 4)).astype(np.float32)
        y = F.mf_pointwise_forward(x, f).data
        assert np.abs(y - dense_conv1x1(x, F.compose_dense(f))).max() < 1e-5

    def test_every_output_connects_to_every_input_once(self, rng):
        f = F.PointwiseFactorization.random(18, 9, 18, 3, 3, rng)
        assert (F.compose_dense(f) != 0).all()
        # path counting with unit weights: exactly one path per (out, in)
        ones = F.PointwiseFactorization(18, 9, 18, 3, 3, np.ones((9, 6)), np.ones((18, 3)),
                                        F.channel_shuffle_perm(9, 3))
        assert np.array_equal(F.compose_dense(ones), np.ones((18, 18)))

    def test_cost_per_location(self):
        f = F.PointwiseFactorization.random(18, 9, 18, 3, 3, np.random.default_rng(0))
        assert f.madds_per_location() == 108 == 2 * 18 ** 2 // (2 * 3)
        m = F.MFPointwise(18, 9, 18, 3, 3)
        assert count_layer(m, (1, 18, 1, 1)).madds == 108

    @pytest.mark.parametrize("seed", range(20))
    def test_rank_at_most_one(self, seed):
        cfg = random_pointwise_config(np.random.default_rng(seed))
        f = F.PointwiseFactorization.random(*cfg, np.random.default_rng(seed + 1))
        ranks = F.block_rank_map(F.compose_dense(f), cfg[3], cfg[4])
        assert ranks.max() <= 1 and (ranks == 1).all()

    def test_zero_matrix_rank_zero(self):
        assert (F.block_rank_map(np.zeros((12, 12)), 3, 4) == 0).all()

    def test_rank_grid_shape(self):
        assert F.block_rank_map(np.ones((12, 6)), 3, 4).shape == (4, 3)

    def test_rank_divisibility(self):
        with pytest.raises(ConfigError):
            F.block_rank_map(np.ones((10, 9)), 3, 4)

    def test_invariant_violations(self, rng):
        with pytest.raises(ConfigError):
            F.PointwiseFactorization.random(10, 6, 12, 4, 2, rng)
        f = F.PointwiseFactorization.random(12, 6, 12, 3, 2, rng)
        with pytest.raises(ShapeError):
            F.mf_pointwise_forward(np.zeros((1, 8, 2, 2)), f)

    def test_module_matches_functional(self, rng):
        m = F.MFPointwise(12, 6, 12, 3, 2, rng=rng)
        x = rng.standard_normal((1, 12, 3, 3)).astype(np.float32)
        f = m.factorization()
        assert np.allclose(m(Tensor(x)).data, F.mf_pointwise_forward(x.astype(np.float64), f).data,
                           atol=1e-5)


class TestDepthwise:
    def test_unit_is_identity(self, rng):
        d = F.DepthwiseFactorization(1, 3, 1, np.ones((3, 1, 1, 1)), np.ones((3, 1, 1, 1)))
        x = rng.standard_normal((1, 3, 4, 4))
        assert np.array_equal(F.mf_depthwise_forward(x, d).data, x)

    @pytest.mark.parametrize("k,stride", [(3, 1), (5, 1), (3, 2), (7, 2)])
    def test_rank_one_kernel_oracle(self, rng, k, stride):
        d = F.DepthwiseFactorization.random(k, 4, 1, rng, dtype=np.float32)
        x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
        y = F.mf_depthwise_forward(x, d, stride).data
        full = T.conv2d(Tensor(x), Tensor(d.full_kernel()), stride, k // 2, groups=4).data
        assert np.abs(y - full).max() < 1e-5

    def test_multiplier(self, rng):
        d = F.DepthwiseFactorization.random(3, 16, 4, rng)
        assert F.mf_depthwise_forward(rng.standard_normal((1, 16, 5, 5)), d).shape == (1, 64, 5, 5)

    def test_cost_example(self):
        m = F.MFDepthwise(64, 5, 1)
        assert count_layer(m, (1, 64, 14, 14)).madds == 125_440
        full = T.conv_output_hw(14, 14, 5, 1, 2)
        assert full[0] * full[1] * 25 * 64 == 313_600

    @pytest.mark.parametrize("k,c,h", [(3, 8, 5), (5, 64, 14), (7, 12, 9)])
    def test_cost_ratio(self, k, c, h):
        fact = mf_depthwise_madds(h, h, h, k, k, c)
        assert fact * k * k == (k + k) * (h * h * k * k * c)


class TestTradeoff:
    def test_example(self):
        (p,) = F.tradeoff_curve(324, 2, [3])
        assert p.C == pytest.approx(math.sqrt(972))
        assert p.E == 54

    def test_g1_max_connectivity(self):
        assert F.tradeoff_curve(500, 4, [1])[0].E == 250

    @pytest.mark.parametrize("O,R", [(324, 2), (1000, 4), (5e6, 6)])
    def test_intercept(self, O, R):
        g = F.intercept_group(O, R)
        (p,) = F.tradeoff_curve(O, R, [g], rtol=1e-9)
        assert p.intercept
        assert p.C == pytest.approx(p.E, rel=1e-12)
        assert g == pytest.approx(math.sqrt(p.C / R), rel=1e-12)

    def test_flags_only_intercept(self):
        pts = F.tradeoff_curve(324, 2, [1, 2, 4, 8])
        assert not any(p.intercept for p in pts)
