import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsta import tensor as tc
from fsta.attention import (
    ConfigError,
    FstaConfig,
    FstaParams,
    combo_index,
    distribute,
    fsta_forward,
    pixel_distribution,
    spatial_attention,
    spatial_squeeze,
    temporal_attention,
    temporal_squeeze,
)
from fsta.baseline import random_instance
from fsta.checks import fsta_case
from fsta.gradcheck import gradcheck
from fsta.tensor import Tensor


def rand_cfg(rng):
    return FstaConfig(
        T=int(rng.integers(1, 7)), C=int(rng.integers(1, 4)), H=int(rng.integers(2, 7)),
        W=int(rng.integers(2, 7)), M=int(rng.integers(1, 5)), N=int(rng.integers(1, 5)),
    )


class TestConfig:
    def test_defaults(self):
        cfg = FstaConfig()
        assert cfg.ref_index == 2
        assert cfg.MN == 16

    @pytest.mark.parametrize("kw", [{"M": 0}, {"k_s": 2}, {"ref_index": 5}, {"H": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            FstaConfig(**kw)

    def test_round_trip(self):
        cfg = FstaConfig(T=3, M=2, N=3, ref_index=0)
        assert FstaConfig.from_dict(cfg.to_dict()) == cfg

    def test_combo_order(self):
        assert combo_index(2, 1, 4) == 9

    def test_input_shape_checked(self):
        cfg = FstaConfig(T=2, H=3, W=3)
        with pytest.raises(ConfigError):
            fsta_forward(Tensor(np.zeros((3, 1, 3, 3))), FstaParams.zeros(cfg), cfg)


class TestSpatial:
    def test_zero_weights_uniform(self):
        cfg = FstaConfig(T=2, M=3, H=3, W=4)
        x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 3, 4)))
        A_s = spatial_attention(x, FstaParams.zeros(cfg), cfg)
        np.testing.assert_allclose(A_s.data, 1.0 / 12, rtol=0, atol=1e-15)

    def test_maps_sum_to_one(self):
        x, p = random_instance(FstaConfig(T=3, M=4, C=2, H=5, W=6), 0)
        A_s = spatial_attention(x, p, FstaConfig(T=3, M=4, C=2, H=5, W=6))
        assert np.max(np.abs(A_s.data.sum(axis=2) - 1)) < 1e-9

    def test_one_hot_concentrates(self):
        cfg = FstaConfig(T=1, M=1, H=4, W=4, k_s=1)
        p = FstaParams.zeros(cfg)
        p = FstaParams(**{**p.tensors(), "w_s": Tensor(np.ones((1, 1, 1, 1)))})
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 2, 1] = 5.0
        A_s = spatial_attention(Tensor(x), p, cfg)
        assert int(np.argmax(A_s.data[0, 0])) == 2 * 4 + 1

    def test_squeeze_uniform_is_mean(self):
        cfg = FstaConfig(T=2, M=2, C=3, H=3, W=3)
        x = np.random.default_rng(1).standard_normal((2, 3, 3, 3))
        A_s = Tensor(np.full((2, 2, 9), 1 / 9))
        G_s = spatial_squeeze(Tensor(x), A_s, cfg).data
        for t in range(2):
            for c in range(3):
                np.testing.assert_allclose(G_s[c, :, t], x[t, c].mean(), atol=1e-14)

    def test_squeeze_one_hot_picks(self):
        cfg = FstaConfig(T=2, M=1, C=2, H=2, W=3)
        x = np.random.default_rng(2).standard_normal((2, 2, 2, 3))
        a = np.zeros((2, 1, 6))
        a[:, 0, 4] = 1.0
        G_s = spatial_squeeze(Tensor(x), Tensor(a), cfg).data
        np.testing.assert_array_equal(G_s[:, 0, :], x[:, :, 1, 1].T)

    def test_squeeze_loop_oracle(self):
        rng = np.random.default_rng(3)
        cfg = FstaConfig(T=3, M=2, C=2, H=3, W=4)
        x = rng.standard_normal((3, 2, 3, 4))
        a = rng.random((3, 2, 12))
        G_s = spatial_squeeze(Tensor(x), Tensor(a), cfg).data
        ref = np.zeros((2, 2, 3))
        for c in range(2):
            for m in range(2):
                for t in range(3):
                    for p in range(12):
                        ref[c, m, t] += a[t, m, p] * x[t, c].reshape(-1)[p]
        assert np.max(np.abs(G_s - ref)) < 1e-12


class TestTemporal:
    def test_zero_weights_uniform(self):
        cfg = FstaConfig(T=5, N=3, H=2, W=2)
        x = Tensor(np.random.default_rng(0).standard_normal((5, 1, 2, 2)))
        _, A_t = temporal_attention(x, FstaParams.zeros(cfg), cfg)
        np.testing.assert_allclose(A_t.data, 0.2, atol=1e-15)

    def test_rows_sum_to_one(self):
        cfg = FstaConfig(T=4, N=3, C=2, H=3, W=3)
        x, p = random_instance(cfg, 4)
        _, A_t = temporal_attention(x, p, cfg)
        assert np.max(np.abs(A_t.data.sum(axis=1) - 1)) < 1e-9

    def test_two_frame_logistic(self):
        # k_t = 1, weight 1, bias 0: logits are the per-frame means a and a + delta
        cfg = FstaConfig(T=2, N=1, H=2, W=2, k_t=1)
        p = FstaParams(**{**FstaParams.zeros(cfg).tensors(), "w_t": Tensor(np.ones((1, 1, 1)))})
        a, delta = 0.3, 0.8
        x = np.stack([np.full((1, 2, 2), a), np.full((1, 2, 2), a + delta)])
        _, A_t = temporal_attention(Tensor(x), p, cfg)
        sig = lambda z: 1 / (1 + np.exp(-z))
        np.testing.assert_allclose(A_t.data[0], [sig(-delta), sig(delta)], rtol=0, atol=1e-15)

    def test_squeeze_uniform_n1(self):
        cfg = FstaConfig(T=4, M=3, N=1, C=2)
        G_s = np.random.default_rng(5).standard_normal((2, 3, 4))
        G_st = temporal_squeeze(Tensor(G_s), Tensor(np.full((1, 4), 0.25)), cfg).data
        np.testing.assert_allclose(G_st, G_s.mean(axis=2), atol=1e-15)

    def test_squeeze_one_hot(self):
        cfg = FstaConfig(T=3, M=2, N=2, C=1)
        G_s = np.random.default_rng(6).standard_normal((1, 2, 3))
        A_t = np.zeros((2, 3))
        A_t[:, 1] = 1.0
        G_st = temporal_squeeze(Tensor(G_s), Tensor(A_t), cfg).data
        for m in range(2):
            for n in range(2):
                assert G_st[0, combo_index(m, n, 2)] == G_s[0, m, 1]

    def test_squeeze_loop_oracle(self):
        rng = np.random.default_rng(7)
        cfg = FstaConfig(T=4, M=3, N=2, C=2)
        G_s, A_t = rng.standard_normal((2, 3, 4)), rng.random((2, 4))
        G_st = temporal_squeeze(Tensor(G_s), Tensor(A_t), cfg).data
        ref = np.zeros((2, 6))
        for c in range(2):
            for m in range(3):
                for n in range(2):
                    for t in range(4):
                        ref[c, m * 2 + n] += G_s[c, m, t] * A_t[n, t]
        assert np.max(np.abs(G_st - ref)) < 1e-12


class TestDistribution:
    def test_zero_weights_uniform(self):
        cfg = FstaConfig(M=2, N=3, H=3, W=3)
        A_p = pixel_distribution(Tensor(np.ones((1, 3, 3))), FstaParams.zeros(cfg), cfg)
        np.testing.assert_allclose(A_p.data, 1 / 6, atol=1e-15)

    def test_columns_sum_to_one(self):
        cfg = FstaConfig(T=3, M=3, N=4, C=2, H=4, W=5)
        x, p = random_instance(cfg, 8)
        A_p = pixel_distribution(tc.take(x, 1, axis=0), p, cfg)
        assert np.max(np.abs(A_p.data.sum(axis=0) - 1)) < 1e-9

    def test_single_combination(self):
        cfg = FstaConfig(T=3, M=1, N=1, C=2, H=4, W=5)
        x, p = random_instance(cfg, 9)
        A_p = pixel_distribution(tc.take(x, 1, axis=0), p, cfg)
        np.testing.assert_array_equal(A_p.data, 1.0)

    def test_distribute_rank_one(self):
        G = np.array([[2.5], [-1.0]])
        y = distribute(Tensor(G), Tensor(np.ones((1, 6)))).data
        np.testing.assert_array_equal(y, np.repeat(G, 6, axis=1))

    def test_distribute_one_hot(self):
        rng = np.random.default_rng(10)
        G = rng.standard_normal((2, 4))
        A = np.zeros((4, 5))
        A[np.arange(5) % 4, np.arange(5)] = 1.0
        y = distribute(Tensor(G), Tensor(A)).data
        for p in range(5):
            np.testing.assert_array_equal(y[:, p], G[:, p % 4])

    def test_distribute_loop_oracle(self):
        rng = np.random.default_rng(11)
        G, A = rng.standard_normal((3, 6)), rng.random((6, 7))
        y = distribute(Tensor(G), Tensor(A)).data
        ref = np.zeros((3, 7))
        for c in range(3):
            for p in range(7):
                for k in range(6):
                    ref[c, p] += G[c, k] * A[k, p]
        assert np.max(np.abs(y - ref)) < 1e-12


class TestForward:
    def test_zero_weights_global_mean(self):
        cfg = FstaConfig(T=3, M=2, N=2, C=2, H=4, W=3)
        x = np.random.default_rng(12).standard_normal((3, 2, 4, 3))
        y, _ = fsta_forward(Tensor(x), FstaParams.zeros(cfg), cfg)
        want = x.mean(axis=(2, 3)).mean(axis=0)
        for c in range(2):
            np.testing.assert_allclose(y.data[c], want[c], atol=1e-14)

    def test_single_frame_single_map(self):
        cfg = FstaConfig(T=1, M=1, N=1, H=3, W=5)
        x = np.random.default_rng(13).standard_normal((1, 1, 3, 5))
        y, _ = fsta_forward(Tensor(x), FstaParams.zeros(cfg), cfg)
        np.testing.assert_allclose(y.data, x[0].mean(), atol=1e-15)

    def test_intermediate_shapes(self):
        cfg = FstaConfig(T=4, M=3, N=2, C=2, H=5, W=6)
        x, p = random_instance(cfg, 14)
        y, inter = fsta_forward(x, p, cfg)
        assert y.shape == (2, 5, 6)
        assert inter.A_s.shape == (4, 3, 30)
        assert inter.G_s.shape == (2, 3, 4)
        assert inter.x_prime.shape == (1, 4)
        assert inter.A_t.shape == (2, 4)
        assert inter.G_st.shape == (2, 6)
        assert inter.A_p.shape == (6, 30)

    def test_deterministic(self):
        cfg = FstaConfig(T=3, M=2, N=2, C=2, H=4, W=4)
        x, p = random_instance(cfg, 15)
        a, _ = fsta_forward(x, p, cfg)
        b, _ = fsta_forward(x, p, cfg)
        assert np.array_equal(a.data, b.data)

    def test_gradcheck(self):
        fn, inputs = fsta_case(1)
        assert gradcheck(fn, inputs, probes=100, seed=1).passed


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_convex_combination_bound(seed):
    """Each output pixel is a convex combination of the window's values per channel."""
    rng = np.random.default_rng(seed)
    cfg = rand_cfg(rng)
    x, p = random_instance(cfg, seed)
    y, _ = fsta_forward(x, p, cfg)
    lo = x.data.min(axis=(0, 2, 3))
    hi = x.data.max(axis=(0, 2, 3))
    for c in range(cfg.C):
        assert y.data[c].min() >= lo[c] - 1e-12
        assert y.data[c].max() <= hi[c] + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_logit_shift_invariance(seed, shift):
    """Adding a constant to every bias leaves the attention maps unchanged."""
    cfg = FstaConfig(T=3, M=2, N=3, C=2, H=4, W=4)
    x, p = random_instance(cfg, seed)
    shifted = FstaParams(**{
        k: Tensor(v.data + shift) if k.startswith("b") else v for k, v in p.tensors().items()
    })
    y0, _ = fsta_forward(x, p, cfg)
    y1, _ = fsta_forward(x, shifted, cfg)
    assert np.max(np.abs(y0.data - y1.data)) < 1e-10


@pytest.mark.parametrize("scale", [1.0, 1e2, 1e3])
def test_normalization_large_logits(scale):
    rng = np.random.default_rng(int(scale))
    for _ in range(10):
        cfg = rand_cfg(rng)
        x, p = random_instance(cfg, int(rng.integers(1 << 30)), logit_scale=scale)
        _, inter = fsta_forward(x, p, cfg)
        assert np.max(np.abs(inter.A_s.data.sum(axis=2) - 1)) < 1e-9
        assert np.max(np.abs(inter.A_t.data.sum(axis=1) - 1)) < 1e-9
        assert np.max(np.abs(inter.A_p.data.sum(axis=0) - 1)) < 1e-9
