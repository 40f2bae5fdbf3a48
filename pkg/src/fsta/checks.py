"""Verification suites shared by the CLI and the test-suite."""

from __future__ import annotations

from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .attention import PARAM_NAMES, FstaConfig, FstaParams, fsta_forward
from .baseline import oracle_check, random_instance
from .gradcheck import GradcheckResult, gradcheck, random_projection, weighted_sum
from .net import FUSION_MODES, NetConfig, forward, init_params
from .tensor import Tensor

Case = Tuple[Callable[[Sequence[Tensor]], Tensor], List[np.ndarray]]


def _projected(op: Callable[..., Tensor], out_shape, seed: int):
    w = random_projection(out_shape, seed)
    return lambda ts: weighted_sum(op(*ts), w)


def primitive_cases(seed: int) -> Dict[str, Case]:
    """One finite-difference case per differentiable primitive."""
    rng = np.random.default_rng(seed)
    r = rng.standard_normal

    def away_from_zero(shape):
        x = r(shape)
        return np.where(np.abs(x) < 0.1, 0.5, x)

    specs = {
        "add": (tc.add, [r((3, 4)), r((3, 4))]),
        "sub": (tc.sub, [r((3, 4)), r((3, 4))]),
        "elementwise_mul": (tc.elementwise_mul, [r((3, 4)), r((3, 4))]),
        "scale": (lambda a: tc.scale(a, -1.7), [r((2, 5))]),
        "matmul": (tc.matmul, [r((3, 4)), r((4, 5))]),
        "bmm": (tc.bmm, [r((2, 3, 4)), r((2, 4, 2))]),
        "softmax": (lambda a: tc.softmax(a, 1), [r((3, 5))]),
        "reduce_sum": (lambda a: tc.reduce_sum(a, 1), [r((3, 4, 2))]),
        "reduce_mean": (lambda a: tc.reduce_mean(a, (0, 2)), [r((3, 4, 2))]),
        "mean_pool_spatial": (tc.mean_pool_spatial, [r((2, 3, 4))]),
        "reshape": (lambda a: tc.reshape(a, (4, 3)), [r((2, 6))]),
        "permute": (lambda a: tc.permute(a, (2, 0, 1)), [r((2, 3, 4))]),
        "take": (lambda a: tc.take(a, 1, axis=1), [r((2, 3, 4))]),
        "concat": (lambda a, b: tc.concat([a, b], axis=1), [r((2, 3)), r((2, 2))]),
        "stack": (lambda a, b: tc.stack([a, b], axis=1), [r((2, 3)), r((2, 3))]),
        "expand": (lambda a: tc.expand(a, 1, 3), [r((2, 4))]),
        "leaky_relu": (tc.leaky_relu, [away_from_zero((3, 4))]),
        "silu": (tc.silu, [4 * r((3, 4))]),
        "sqrt": (tc.sqrt, [np.abs(r((3, 4))) + 0.5]),
        "avg_pool2": (tc.avg_pool2, [r((2, 4, 6))]),
        "upsample2": (tc.upsample2, [r((2, 3, 2))]),
        "conv2d": (tc.conv2d, [r((2, 3, 5, 5)), r((4, 3, 3, 3)), r((4,))]),
        "conv1d": (tc.conv1d, [r((2, 6)), r((3, 2, 3)), r((3,))]),
    }
    cases = {}
    for k, (name, (op, inputs)) in enumerate(specs.items()):
        with tc.no_grad():
            out_shape = op(*[Tensor(a) for a in inputs]).shape
        cases[name] = (_projected(op, out_shape, seed + 1000 + k), inputs)
    return cases


def fsta_case(seed: int, cfg: FstaConfig = None) -> Case:
    cfg = cfg or FstaConfig(T=3, M=2, N=3, C=2, H=4, W=5)
    x, params = random_instance(cfg, seed)
    # non-zero biases so every parameter has a generic gradient
    rng = np.random.default_rng(seed + 7)
    arrays = [x.data] + [
        rng.uniform(-0.5, 0.5, size=p.shape) if name.startswith("b") else p.data
        for name, p in params.tensors().items()
    ]
    w = random_projection((cfg.C, cfg.H, cfg.W), seed + 11)

    def fn(ts):
        fp = FstaParams(**dict(zip(PARAM_NAMES, ts[1:])))
        y, _ = fsta_forward(ts[0], fp, cfg)
        return weighted_sum(y, w)

    return fn, arrays


def net_case(seed: int, mode: str = "fsta", T: int = 3, size: int = 16) -> Case:
    cfg = NetConfig(T=T, fusion_mode=mode)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed, dtype=np.float64, requires_grad=False)
    # the output conv is zero at init; randomize it so upstream gradients are non-zero
    params["tail.w"] = Tensor(rng.uniform(-0.2, 0.2, size=params["tail.w"].shape))
    names = list(params)
    window = rng.uniform(0.0, 1.0, size=(T, 1, size, size))
    w = random_projection((1, size, size), seed + 13)

    def fn(ts):
        p = dict(zip(names, ts[1:]))
        return weighted_sum(forward(ts[0], p, cfg), w)

    return fn, [window] + [params[k].data for k in names]


def run_gradchecks(target: str, seed: int, probes: int = 100) -> Dict[str, GradcheckResult]:
    """``target`` is "primitives", "fsta", "net" or "all"."""
    results: Dict[str, GradcheckResult] = {}
    if target in ("primitives", "all"):
        for name, (fn, inputs) in primitive_cases(seed).items():
            results[f"primitive.{name}"] = gradcheck(fn, inputs, probes=probes, seed=seed)
    if target in ("fsta", "all"):
        fn, inputs = fsta_case(seed)
        results["fsta_forward"] = gradcheck(fn, inputs, probes=probes, seed=seed)
    if target in ("net", "all"):
        for mode in FUSION_MODES:
            fn, inputs = net_case(seed, mode)
            results[f"net.{mode}"] = gradcheck(fn, inputs, probes=probes, seed=seed)
    if not results:
        raise ValueError(f"unknown gradcheck target {target!r}")
    return results


def random_shape(rng: np.random.Generator) -> FstaConfig:
    """T in 1..6, H, W in 2..6, M, N in 1..4, C in 1..3."""
    return FstaConfig(
        T=int(rng.integers(1, 7)), H=int(rng.integers(2, 7)), W=int(rng.integers(2, 7)),
        M=int(rng.integers(1, 5)), N=int(rng.integers(1, 5)), C=int(rng.integers(1, 4)),
    )


def oracle_sweep(seeds: int, base_seed: int = 0) -> List[Dict[str, object]]:
    rows = []
    for s in range(base_seed, base_seed + seeds):
        cfg = random_shape(np.random.default_rng(s))
        x, params = random_instance(cfg, s)
        rep = oracle_check(x, params, cfg)
        rep["seed"] = s
        rep["shape"] = {k: getattr(cfg, k) for k in ("T", "C", "H", "W", "M", "N")}
        rows.append(rep)
    return rows
