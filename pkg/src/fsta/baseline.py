"""Reference implementations the factorized operator is checked against.

``effective_affinity`` materializes the HW x (T*HW) matrix that the three
factorized stages implicitly apply to the reference frame; multiplying it
with the flattened window must reproduce ``fsta_forward`` exactly.

``dense_nonlocal_forward`` is the embedded-Gaussian non-local block that
builds the full (T*HW)^2 affinity. It is the memory foil, not a fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as tc
from .attention import FstaConfig, FstaIntermediates, FstaParams, fsta_forward
from .tensor import Tensor

MAX_AFFINITY_ELEMS = 10**8


class MemoryGuardError(RuntimeError):
    pass


def _guard(n: int, what: str) -> None:
    if n > MAX_AFFINITY_ELEMS:
        raise MemoryGuardError(f"{what} would hold {n:,} entries (limit {MAX_AFFINITY_ELEMS:,})")


@dataclass
class EffectiveAffinity:
    W_eff: np.ndarray  # [HW, T*HW]


def effective_affinity(inter: FstaIntermediates, cfg: FstaConfig) -> EffectiveAffinity:
    """W_eff[p, t*HW + q] = sum_{m,n} A_p[m*N+n, p] * A_t[n, t] * A_s[t, m, q]."""
    _guard(cfg.T * cfg.HW * cfg.HW, "effective affinity")
    A_s = inter.A_s.data.astype(np.float64)
    A_t = inter.A_t.data.astype(np.float64)
    A_p = inter.A_p.data.astype(np.float64).reshape(cfg.M, cfg.N, cfg.HW)
    W = np.zeros((cfg.HW, cfg.T, cfg.HW))
    for m in range(cfg.M):
        for n in range(cfg.N):
            # outer product of the pixel weight with the (t, q) source weights
            src = A_t[n][:, None] * A_s[:, m, :]  # [T, HW]
            W += A_p[m, n][:, None, None] * src[None]
    return EffectiveAffinity(W.reshape(cfg.HW, cfg.T * cfg.HW))


def apply_affinity(aff: EffectiveAffinity, x: np.ndarray) -> np.ndarray:
    """Apply W_eff to window ``x`` [T,C,H,W]; returns [C, HW]."""
    t, c, h, w = x.shape
    flat = x.astype(np.float64).transpose(1, 0, 2, 3).reshape(c, t * h * w)
    return flat @ aff.W_eff.T


def rank_check(aff: EffectiveAffinity, cfg: FstaConfig, rel_tol: float = 1e-8) -> Dict[str, object]:
    """Singular values past index M*N must be negligible relative to the largest."""
    s = np.linalg.svd(aff.W_eff, compute_uv=False)
    tail = s[cfg.MN :]
    ratio = float(tail.max() / s[0]) if tail.size else 0.0
    return {"rank_bound": cfg.MN, "tail_ratio": ratio, "pass": bool(ratio < rel_tol)}


def oracle_check(x: Tensor, params: FstaParams, cfg: FstaConfig, tol: float = 1e-9) -> Dict[str, object]:
    with tc.no_grad():
        y, inter = fsta_forward(x, params, cfg)
    aff = effective_affinity(inter, cfg)
    expected = apply_affinity(aff, x.data)
    diff = float(np.max(np.abs(expected - y.data.reshape(cfg.C, cfg.HW))))
    rows = aff.W_eff.sum(axis=1)
    return {
        "max_abs_diff": diff,
        "row_sum_err": float(np.max(np.abs(rows - 1.0))),
        "rank_check": rank_check(aff, cfg),
        "pass": bool(diff < tol),
    }


@dataclass
class DenseNonLocalParams:
    w_q: Tensor  # [C_e, C, 1, 1]
    b_q: Tensor
    w_k: Tensor  # [C_e, C, 1, 1]
    b_k: Tensor
    w_v: Tensor  # [C, C, 1, 1]
    b_v: Tensor

    @staticmethod
    def embed_channels(c: int) -> int:
        return (c + 1) // 2

    @staticmethod
    def shapes(c: int):
        ce = DenseNonLocalParams.embed_channels(c)
        return {
            "w_q": (ce, c, 1, 1), "b_q": (ce,),
            "w_k": (ce, c, 1, 1), "b_k": (ce,),
            "w_v": (c, c, 1, 1), "b_v": (c,),
        }

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, dtype=np.float64, requires_grad=False):
        out = {}
        for name, shape in cls.shapes(c).items():
            if name.startswith("b"):
                arr = np.zeros(shape)
            else:
                bound = math.sqrt(1.0 / shape[1])
                arr = rng.uniform(-bound, bound, size=shape)
            out[name] = Tensor(arr.astype(dtype), requires_grad=requires_grad)
        return cls(**out)

    def tensors(self) -> Dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v")}


def dense_nonlocal_forward(
    x: Tensor, params: DenseNonLocalParams, return_affinity: bool = False
):
    """y = x + softmax(Q K^T / sqrt(C_e)) V over all T*H*W positions."""
    t, c, h, w = x.shape
    n = t * h * w
    _guard(n * n, "dense non-local affinity")
    ce = params.w_q.shape[0]

    def embed(wt, bt, ch):
        e = tc.conv2d(x, wt, bt)  # [T, ch, H, W]
        return tc.reshape(tc.permute(e, (0, 2, 3, 1)), (n, ch))

    q = embed(params.w_q, params.b_q, ce)
    k = embed(params.w_k, params.b_k, ce)
    v = embed(params.w_v, params.b_v, c)
    logits = tc.scale(tc.matmul(q, tc.permute(k, (1, 0))), 1.0 / math.sqrt(ce))
    affinity = tc.softmax(logits, axis=1)  # [n, n]
    del logits
    agg = tc.matmul(affinity, v)  # [n, C]
    agg = tc.permute(tc.reshape(agg, (t, h, w, c)), (0, 3, 1, 2))
    y = tc.add(x, agg)
    if return_affinity:
        return y, affinity
    return y


def random_instance(cfg: FstaConfig, seed: int, logit_scale: Optional[float] = None):
    """Random window and parameters; ``logit_scale`` inflates weights to push logits large."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((cfg.T, cfg.C, cfg.H, cfg.W)))
    params = FstaParams.init(cfg, rng)
    if logit_scale is not None:
        scaled = {}
        for k, v in params.tensors().items():
            if k.startswith("b"):
                scaled[k] = Tensor(rng.uniform(-logit_scale, logit_scale, size=v.shape))
            else:
                scaled[k] = Tensor(v.data * logit_scale)
        params = FstaParams(**scaled)
    return x, params
