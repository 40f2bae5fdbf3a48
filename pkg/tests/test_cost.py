import numpy as np
import pytest

from fsta.attention import FstaConfig, FstaParams, fsta_forward
from fsta.baseline import DenseNonLocalParams, MemoryGuardError, random_instance
from fsta.cost import analytic_cost, bench_row, dense_affinity_elems, fsta_attention_elems, measured_cost
from fsta.tensor import Tensor


@pytest.mark.parametrize(
    "cfg",
    [FstaConfig(T=4, H=7, W=7, M=4, N=4), FstaConfig(T=3, H=5, W=6, M=2, N=3, C=2), FstaConfig(T=1, H=2, W=2, M=1, N=1)],
)
def test_counts_follow_intermediate_shapes(cfg):
    x, p = random_instance(cfg, 0)
    _, inter = fsta_forward(x, p, cfg)
    assert fsta_attention_elems(cfg) == inter.A_s.size + inter.A_t.size + inter.A_p.size
    assert dense_affinity_elems(cfg) == (x.size // cfg.C) ** 2


def test_typical_size():
    rep = analytic_cost(FstaConfig(T=4, H=7, W=7, M=4, N=4))
    assert rep.dense_affinity_elems == (4 * 49) ** 2 == 38416
    assert rep.fsta_attention_elems == 4 * 4 * 49 + 4 * 4 + 16 * 49 == 1584
    assert rep.ratio == pytest.approx(24.25, abs=0.01)
    assert not rep.degenerate


def test_training_size():
    rep = analytic_cost(FstaConfig(T=5, H=64, W=64, M=4, N=4))
    assert rep.dense_affinity_elems == 419_430_400
    assert rep.fsta_attention_elems == 147_476
    assert rep.ratio == pytest.approx(2844, abs=0.1)


def test_degenerate_flagged():
    rep = analytic_cost(FstaConfig(T=1, H=1, W=1, M=1, N=1, k_s=1, k_p=1, k_t=1))
    assert (rep.dense_affinity_elems, rep.fsta_attention_elems) == (1, 3)
    assert rep.ratio < 1
    assert rep.degenerate


def test_flops_positive_and_dense_dominates():
    rep = analytic_cost(FstaConfig(T=4, H=7, W=7, M=4, N=4))
    assert 0 < rep.fsta_flops < rep.dense_flops


def test_measured_fsta_within_twice_analytic():
    cfg = FstaConfig(T=3, H=8, W=8, M=4, N=4)
    x, p = random_instance(cfg, 0)
    rep = measured_cost(x, p, cfg, "fsta")
    assert rep.fsta_attention_elems <= rep.measured_peak_elems <= 2 * rep.fsta_attention_elems


def test_measured_dense_holds_affinity():
    cfg = FstaConfig(T=4, H=7, W=7)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 1, 7, 7)))
    rep = measured_cost(x, DenseNonLocalParams.init(1, np.random.default_rng(1)), cfg, "dense")
    assert rep.measured_peak_elems >= 38416


def test_measured_deterministic():
    cfg = FstaConfig(T=3, H=8, W=8)
    a, _ = bench_row(cfg, "fsta", 1, 3)
    b, _ = bench_row(cfg, "fsta", 1, 3)
    assert a.to_dict() == b.to_dict()


def test_dense_guard():
    cfg = FstaConfig(T=5, H=64, W=64)
    with pytest.raises(MemoryGuardError):
        measured_cost(Tensor(np.zeros((5, 1, 64, 64))), None, cfg, "dense")


def test_bad_mode():
    cfg = FstaConfig(T=1, H=2, W=2)
    with pytest.raises(ValueError):
        measured_cost(Tensor(np.zeros((1, 1, 2, 2))), FstaParams.zeros(cfg), cfg, "sparse")
