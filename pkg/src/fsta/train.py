"""Seeded training loop, Adam, and held-out evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tc
from .metrics import psnr, ssim
from .net import NetConfig, check_params, forward_batch, init_params
from .synth import SyntheticSequence, generate, valid_centers
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSSES = ("l2", "charbonnier")
CHARBONNIER_EPS = 1e-3
EPOCHS_PER_HALVING = 200


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 64
    batch: int = 4
    lr: float = 1e-4
    lr_halve_every: Optional[int] = None  # steps; None derives it from the epoch length
    steps: int = 2000
    seed: int = 0
    loss: str = "l2"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.patch < 1 or self.batch < 1 or self.steps < 0:
            raise ValueError(f"invalid train config {self}")


@dataclass(frozen=True)
class DataConfig:
    train_sequences: int = 8
    eval_sequences: int = 4
    frames: int = 12
    train_size: int = 96
    eval_size: int = 64
    num_objects: int = 10
    vmax: float = 3.0
    exposure: int = 9
    seed: int = 0
    eval_seed_offset: int = 10_000

    def train_data(self) -> List[SyntheticSequence]:
        return [
            generate(self.seed + i, self.frames, self.train_size, self.train_size, self.num_objects, self.vmax, self.exposure)
            for i in range(self.train_sequences)
        ]

    def eval_data(self) -> List[SyntheticSequence]:
        base = self.seed + self.eval_seed_offset
        return [
            generate(base + i, self.frames, self.eval_size, self.eval_size, self.num_objects, self.vmax, self.exposure)
            for i in range(self.eval_sequences)
        ]


def _coerce(cls, d: Dict[str, str]):
    types = {f.name: f.type for f in fields(cls)}
    unknown = set(d) - set(types)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        t = str(types[k])
        if v in ("None", "") and "Optional" in t:
            out[k] = None
        elif "float" in t:
            out[k] = float(v)
        elif "int" in t:
            out[k] = int(v)
        else:
            out[k] = str(v)
    return cls(**out)


def train_config_from_dict(d: Dict[str, str]) -> TrainConfig:
    return _coerce(TrainConfig, d)


def data_config_from_dict(d: Dict[str, str]) -> DataConfig:
    return _coerce(DataConfig, d)


# ---------------------------------------------------------------------------


def loss_fn(pred: Tensor, target: Tensor, kind: str) -> Tensor:
    diff = tc.sub(pred, target)
    sq = tc.elementwise_mul(diff, diff)
    if kind == "l2":
        return tc.reduce_mean(sq)
    eps2 = Tensor(np.full(sq.shape, CHARBONNIER_EPS**2, dtype=sq.dtype))
    return tc.reduce_mean(tc.sqrt(tc.add(sq, eps2)))


class Adam:
    """Adam over a name -> Tensor mapping; returns fresh parameter tensors."""

    def __init__(self, params: Dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray], lr: float) -> Dict[str, Tensor]:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = Tensor((p.data - upd).astype(p.dtype), requires_grad=True)
        return out


def _windows(data: Sequence[SyntheticSequence], T: int) -> List[Tuple[int, int]]:
    return [(i, c) for i, seq in enumerate(data) for c in valid_centers(seq.num_frames, T)]


def lr_at(step: int, base_lr: float, halve_every: int) -> float:
    return base_lr * 0.5 ** (step // halve_every)


def halving_period(tcfg: TrainConfig, num_windows: int) -> int:
    """Steps per halving: 200 epochs, one epoch being one pass over all windows."""
    if tcfg.lr_halve_every is not None:
        return tcfg.lr_halve_every
    return EPOCHS_PER_HALVING * max(1, math.ceil(num_windows / tcfg.batch))


def sample_batch(
    data: Sequence[SyntheticSequence], pool: List[Tuple[int, int]], T: int, patch: int, batch: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random windows with random crops: blurred [B,T,C,p,p], sharp [B,C,p,p]."""
    xs, ys = [], []
    for k in rng.integers(0, len(pool), size=batch):
        i, c = pool[k]
        seq = data[i]
        _, _, h, w = seq.sharp.shape
        if h < patch or w < patch:
            raise ValueError(f"sequence {h}x{w} smaller than patch {patch}")
        oy = int(rng.integers(0, h - patch + 1))
        ox = int(rng.integers(0, w - patch + 1))
        lo = c - T // 2
        xs.append(seq.blurred.data[lo : lo + T, :, oy : oy + patch, ox : ox + patch])
        ys.append(seq.sharp.data[c, :, oy : oy + patch, ox : ox + patch])
    return np.stack(xs), np.stack(ys)


@dataclass
class TrainResult:
    params: Dict[str, Tensor]
    curve: List[Tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)


def train(
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    data: Sequence[SyntheticSequence],
    params: Optional[Dict[str, Tensor]] = None,
    progress_every: int = 0,
) -> TrainResult:
    """Adam on random windows/crops from a stream seeded by ``train_cfg.seed``."""
    if train_cfg.patch % 2**net_cfg.depth:
        raise ValueError(f"patch {train_cfg.patch} not divisible by 2^{net_cfg.depth}")
    pool = _windows(data, net_cfg.T)
    if not pool:
        raise ValueError("no complete windows in training data")
    if params is None:
        params = init_params(net_cfg, train_cfg.seed)
    check_params(params, net_cfg)
    params = {k: Tensor(v.data, requires_grad=True) for k, v in params.items()}
    names = list(params)
    opt = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    halve = halving_period(train_cfg, len(pool))
    rng = np.random.default_rng(train_cfg.seed + 1)
    curve = []
    for step in range(train_cfg.steps):
        xb, yb = sample_batch(data, pool, net_cfg.T, train_cfg.patch, train_cfg.batch, rng)
        pred = forward_batch(Tensor(xb), params, net_cfg)
        loss = loss_fn(pred, Tensor(yb), train_cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        grads = tc.backward(loss)
        lr = lr_at(step, train_cfg.lr, halve)
        params = opt.step(params, {k: grads.get(params[k], np.zeros_like(params[k].data)) for k in names}, lr)
        curve.append((step, value, lr))
        if progress_every and step % progress_every == 0:
            log.info("step %d loss %.6f lr %.3g", step, value, lr)
    return TrainResult(params, curve)


@dataclass
class EvalReport:
    psnr_in: float
    psnr_out: float
    ssim_in: float
    ssim_out: float
    frames: int
    per_sequence: List[Dict[str, float]]
    note: str = "frames whose window leaves the sequence are skipped"

    def to_dict(self):
        return asdict(self)


def restore_sequence(seq: SyntheticSequence, params: Dict[str, Tensor], net_cfg: NetConfig) -> Dict[int, np.ndarray]:
    """Full-frame restoration of every frame with a complete window."""
    centers = valid_centers(seq.num_frames, net_cfg.T)
    if not centers:
        return {}
    dtype = next(iter(params.values())).dtype
    lo = net_cfg.T // 2
    blurred = seq.blurred.data.astype(dtype)
    windows = np.stack([blurred[c - lo : c - lo + net_cfg.T] for c in centers])
    with tc.no_grad():
        out = forward_batch(Tensor(windows), params, net_cfg).data
    return {c: out[k] for k, c in enumerate(centers)}


def evaluate(params: Dict[str, Tensor], net_cfg: NetConfig, data: Sequence[SyntheticSequence]) -> EvalReport:
    per_seq = []
    all_in, all_out, all_sin, all_sout = [], [], [], []
    for seq in data:
        restored = restore_sequence(seq, params, net_cfg)
        p_in, p_out, s_in, s_out = [], [], [], []
        for c, img in restored.items():
            sharp = seq.sharp.data[c]
            blurred = seq.blurred.data[c]
            p_in.append(psnr(blurred, sharp))
            p_out.append(psnr(np.clip(img, 0.0, 1.0), sharp))
            s_in.append(ssim(blurred, sharp))
            s_out.append(ssim(np.clip(img, 0.0, 1.0), sharp))
        per_seq.append(
            {
                "seed": seq.meta.get("seed"),
                "psnr_in": float(np.mean(p_in)),
                "psnr_out": float(np.mean(p_out)),
                "ssim_in": float(np.mean(s_in)),
                "ssim_out": float(np.mean(s_out)),
            }
        )
        all_in += p_in
        all_out += p_out
        all_sin += s_in
        all_sout += s_out
    return EvalReport(
        psnr_in=float(np.mean(all_in)),
        psnr_out=float(np.mean(all_out)),
        ssim_in=float(np.mean(all_sin)),
        ssim_out=float(np.mean(all_sout)),
        frames=len(all_in),
        per_sequence=per_seq,
    )
