"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, elementwise_mul, grad, reduce_sum, reshape


@dataclass
class GradcheckResult:
    max_rel_error: float
    probes: int
    passed: bool


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    rtol: float = 1e-4,
    probes: Optional[int] = 100,
    seed: int = 0,
    floor_frac: float = 1e-3,
) -> GradcheckResult:
    """Compare reverse-mode gradients of ``fn`` to central differences.

    ``fn`` receives float64 tensors built from ``inputs`` and must return a
    scalar. ``probes`` random coordinates (across all inputs) are checked;
    ``None`` checks every coordinate.

    The error for each coordinate is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = floor_frac * max|gradient|`` (at least 1e-12). Entries far below
    the gradient's own scale carry only finite-difference noise in their
    relative error, so they are compared against the floor instead.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = grad(fn(leaves), leaves)

    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    if probes is not None and probes < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    def evaluate(i: int, j: int, delta: float) -> float:
        bumped = [a.copy() for a in arrays]
        bumped[i].reshape(-1)[j] += delta
        return fn([Tensor(a) for a in bumped]).item()

    scale = max(float(np.max(np.abs(g))) for g in analytic)
    floor = max(floor_frac * scale, 1e-12)
    worst = 0.0
    for i, j in coords:
        numeric = (evaluate(i, j, eps) - evaluate(i, j, -eps)) / (2 * eps)
        worst = max(worst, _rel_error(float(analytic[i].reshape(-1)[j]), numeric, floor))
    return GradcheckResult(worst, len(coords), worst < rtol)


def random_projection(shape: Sequence[int], seed: int) -> np.ndarray:
    """Fixed random weights for turning a tensor output into a scalar loss."""
    return np.random.default_rng(seed).standard_normal(tuple(shape))


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar <out, weights>; a random ``weights`` exercises every output entry."""
    flat = reshape(elementwise_mul(out, Tensor(weights.astype(out.dtype))), (out.size,))
    return reduce_sum(flat, 0)


__all__: List[str] = ["GradcheckResult", "gradcheck", "random_projection", "weighted_sum"]
