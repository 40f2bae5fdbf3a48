import numpy as np
import pytest

from fsta import tensor as tc
from fsta.attention import ConfigError
from fsta.checks import net_case
from fsta.gradcheck import gradcheck
from fsta.net import FUSION_MODES, NetConfig, all_param_shapes, forward, forward_batch, fuse, init_params, zero_params
from fsta.tensor import Tensor


def window(T, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, size=(T, 1, size, size)).astype(np.float32))


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_zero_weights_return_blurred_reference(mode):
    cfg = NetConfig(T=3, fusion_mode=mode)
    w = window(3)
    out = forward(w, zero_params(cfg), cfg)
    assert np.array_equal(out.data, w.data[1])


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_fresh_init_is_identity(mode):
    cfg = NetConfig(T=3, fusion_mode=mode)
    w = window(3, seed=1)
    assert np.array_equal(forward(w, init_params(cfg, 0), cfg).data, w.data[1])


def test_single_frame_equals_average_at_t1():
    params = init_params(NetConfig(T=1, fusion_mode="average"), 2)
    params["tail.w"] = Tensor(np.full(params["tail.w"].shape, 0.05, dtype=np.float32))
    w = window(1, seed=2)
    a = forward(w, params, NetConfig(T=1, fusion_mode="average")).data
    b = forward(w, params, NetConfig(T=1, fusion_mode="single_frame")).data
    assert np.array_equal(a, b)


def test_single_frame_ignores_neighbors():
    cfg = NetConfig(T=3, fusion_mode="single_frame")
    params = init_params(cfg, 3)
    params["tail.w"] = Tensor(np.full(params["tail.w"].shape, 0.05, dtype=np.float32))
    w = window(3, seed=3).data.copy()
    base = forward(Tensor(w), params, cfg).data
    w[0] += 0.3
    w[2] = 0.0
    assert np.array_equal(forward(Tensor(w), params, cfg).data, base)


def test_fsta_uses_neighbors():
    cfg = NetConfig(T=3, fusion_mode="fsta")
    params = init_params(cfg, 3)
    params["tail.w"] = Tensor(np.full(params["tail.w"].shape, 0.05, dtype=np.float32))
    w = window(3, seed=3).data.copy()
    base = forward(Tensor(w), params, cfg).data
    w[0] += 0.3
    assert not np.array_equal(forward(Tensor(w), params, cfg).data, base)


def test_fuse_average_of_identical_frames():
    f = np.random.default_rng(4).standard_normal((1, 3, 4, 4))
    out = fuse(Tensor(np.repeat(f, 3, axis=0)), "average", {}, NetConfig(T=3))
    np.testing.assert_allclose(out.data, f[0], atol=1e-15)


def test_fuse_fsta_zero_attention_weights():
    cfg = NetConfig(T=3, M=2, N=2)
    feats = np.random.default_rng(5).standard_normal((3, cfg.channels(cfg.depth), 2, 2))
    params = zero_params(cfg, dtype=np.float64)
    out = fuse(Tensor(feats), "fsta", params, cfg).data
    want = feats[1] + feats.mean(axis=(0, 2, 3))[:, None, None]
    assert np.max(np.abs(out - want)) < 1e-14


def test_fuse_unknown_mode():
    with pytest.raises(ConfigError):
        fuse(Tensor(np.zeros((3, 1, 2, 2))), "median", {}, NetConfig(T=3))


def test_config_validation():
    with pytest.raises(ConfigError):
        NetConfig(fusion_mode="median")
    with pytest.raises(ConfigError):
        forward(window(3, size=18), init_params(NetConfig(T=3), 0), NetConfig(T=3))
    assert NetConfig.from_dict(NetConfig(T=3, M=2).to_dict()) == NetConfig(T=3, M=2)


def test_param_shapes_by_mode():
    assert any(k.startswith("fsta.") for k in all_param_shapes(NetConfig(fusion_mode="fsta")))
    assert any(k.startswith("nl.") for k in all_param_shapes(NetConfig(fusion_mode="dense_nonlocal")))
    assert not any(k.startswith(("fsta.", "nl.")) for k in all_param_shapes(NetConfig(fusion_mode="average")))


def test_batch_matches_single():
    cfg = NetConfig(T=3)
    params = init_params(cfg, 6, dtype=np.float64)
    params["tail.w"] = Tensor(np.random.default_rng(6).uniform(-0.1, 0.1, params["tail.w"].shape))
    ws = np.random.default_rng(7).uniform(0, 1, size=(2, 3, 1, 16, 16))
    with tc.no_grad():
        batched = forward_batch(Tensor(ws), params, cfg).data
        singles = [forward(Tensor(ws[k]), params, cfg).data for k in range(2)]
    for k in range(2):
        assert np.max(np.abs(batched[k] - singles[k])) < 1e-12


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_end_to_end_gradcheck(mode):
    fn, inputs = net_case(0, mode, T=3, size=16)
    res = gradcheck(fn, inputs, eps=1e-5, rtol=1e-4, probes=100)
    assert res.passed, res
