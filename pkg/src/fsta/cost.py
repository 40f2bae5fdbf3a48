"""Element and FLOP accounting for factorized vs. dense attention.

Memory is counted in tensor elements so the numbers do not depend on dtype.
FLOPs cover the fusion mechanism only (logit convolutions, softmaxes,
weighted sums, products), with one multiply-add counted as 2 FLOPs and a
softmax as 3 FLOPs per element (exp, sum, divide).
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .attention import FstaConfig, FstaParams, fsta_forward
from .baseline import DenseNonLocalParams, _guard, dense_nonlocal_forward
from .tensor import Tensor

FSTA_FLOP_FORMULA = (
    "2*k_s^2*C*M*T*HW + 3*T*M*HW + 2*C*T*M*HW + C*T*HW + 2*k_t*N*T + 3*N*T"
    " + 2*C*M*N*T + 2*k_p^2*C*M*N*HW + 3*M*N*HW + 2*C*M*N*HW"
)
DENSE_FLOP_FORMULA = "2*C*(2*C_e + C)*THW + 2*C_e*THW^2 + 3*THW^2 + 2*C*THW^2 + C*THW"


@dataclass
class CostReport:
    T: int
    H: int
    W: int
    M: int
    N: int
    C: int
    dense_affinity_elems: int
    fsta_attention_elems: int
    dense_flops: int
    fsta_flops: int
    ratio: float
    degenerate: bool
    measured_peak_elems: Optional[int] = None
    measured_bytes: Optional[int] = None
    mode: Optional[str] = None
    fsta_flop_formula: str = FSTA_FLOP_FORMULA
    dense_flop_formula: str = DENSE_FLOP_FORMULA

    def to_dict(self):
        return asdict(self)


def fsta_attention_elems(cfg: FstaConfig) -> int:
    """Elements of A_s, A_t and A_p combined."""
    return cfg.T * cfg.M * cfg.HW + cfg.N * cfg.T + cfg.MN * cfg.HW


def dense_affinity_elems(cfg: FstaConfig) -> int:
    return (cfg.T * cfg.HW) ** 2


def fsta_flops(cfg: FstaConfig) -> int:
    T, C, M, N, HW = cfg.T, cfg.C, cfg.M, cfg.N, cfg.HW
    return (
        2 * cfg.k_s**2 * C * M * T * HW  # f_s logits
        + 3 * T * M * HW  # spatial softmax
        + 2 * C * T * M * HW  # spatial squeeze
        + C * T * HW  # pooling for x'
        + 2 * cfg.k_t * N * T  # f_t logits
        + 3 * N * T  # temporal softmax
        + 2 * C * M * N * T  # temporal squeeze
        + 2 * cfg.k_p**2 * C * M * N * HW  # f_p logits
        + 3 * M * N * HW  # pixel softmax
        + 2 * C * M * N * HW  # distribution
    )


def dense_flops(cfg: FstaConfig) -> int:
    n = cfg.T * cfg.HW
    c = cfg.C
    ce = DenseNonLocalParams.embed_channels(c)
    return 2 * c * (2 * ce + c) * n + 2 * ce * n * n + 3 * n * n + 2 * c * n * n + c * n


def analytic_cost(cfg: FstaConfig) -> CostReport:
    dense = dense_affinity_elems(cfg)
    fsta = fsta_attention_elems(cfg)
    ratio = dense / fsta
    return CostReport(
        T=cfg.T, H=cfg.H, W=cfg.W, M=cfg.M, N=cfg.N, C=cfg.C,
        dense_affinity_elems=dense,
        fsta_attention_elems=fsta,
        dense_flops=dense_flops(cfg),
        fsta_flops=fsta_flops(cfg),
        ratio=ratio,
        degenerate=ratio <= 1.0,
    )


def measured_cost(x: Tensor, params, cfg: FstaConfig, mode: str = "fsta") -> CostReport:
    """Run one forward pass (no graph) and record the peak of live tensor elements.

    Inputs and parameters exist before counting starts and are excluded;
    the peak covers tensors the forward pass itself materializes.
    """
    if mode not in ("fsta", "dense"):
        raise ValueError(f"mode must be 'fsta' or 'dense', got {mode!r}")
    if mode == "dense":
        _guard(dense_affinity_elems(cfg), "dense non-local affinity")
    with tc.no_grad(), tc.track_allocations() as counter:
        if mode == "fsta":
            out = fsta_forward(x, params, cfg)
        else:
            out = dense_nonlocal_forward(x, params)
        del out
    report = analytic_cost(cfg)
    report.measured_peak_elems = counter.peak
    report.measured_bytes = counter.peak * x.dtype.itemsize
    report.mode = mode
    return report


def bench_row(cfg: FstaConfig, mode: str, repeat: int, seed: int):
    """One CSV row: analytic counts, measured peak and mean wall time in ms."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((cfg.T, cfg.C, cfg.H, cfg.W)))
    params = FstaParams.init(cfg, rng) if mode == "fsta" else DenseNonLocalParams.init(cfg.C, rng)
    report = measured_cost(x, params, cfg, mode)
    fwd = (lambda: fsta_forward(x, params, cfg)) if mode == "fsta" else (lambda: dense_nonlocal_forward(x, params))
    start = time.perf_counter()
    with tc.no_grad():
        for _ in range(repeat):
            fwd()
    wall_ms = (time.perf_counter() - start) * 1000.0 / max(repeat, 1)
    return report, wall_ms
