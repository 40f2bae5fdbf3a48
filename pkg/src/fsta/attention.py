"""Factorized spatio-temporal attention.

The operator fuses a window of T frames into one output map for the
reference frame in three stages:

1. spatial squeeze: M softmax-over-pixels maps per frame, each summarizing
   its frame into one descriptor per channel;
2. temporal squeeze: N softmax-over-frames maps blending the M x T
   descriptors into M*N global descriptors;
3. pixelwise distribution: a softmax over the M*N descriptors at every
   pixel of the reference frame selects what each pixel receives.

Attention maps are computed once from all C channels; squeezing and
distribution act on every channel with the shared maps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as tc
from .tensor import Tensor

# Flat index of combination (m, n) is m * N + n in both G_st and A_p rows.
COMBO_ORDER = "m*N+n"


def combo_index(m: int, n: int, n_temporal: int) -> int:
    return m * n_temporal + n


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FstaConfig:
    T: int = 5
    M: int = 4
    N: int = 4
    C: int = 1
    H: int = 16
    W: int = 16
    k_s: int = 3
    k_t: int = 3
    k_p: int = 3
    ref_index: Optional[int] = None

    def __post_init__(self):
        for name in ("T", "M", "N", "C", "H", "W"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("k_s", "k_t", "k_p"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")
        if self.ref_index is None:
            object.__setattr__(self, "ref_index", self.T // 2)
        if not 0 <= self.ref_index < self.T:
            raise ConfigError(f"ref_index {self.ref_index} outside window of length {self.T}")

    @property
    def HW(self) -> int:
        return self.H * self.W

    @property
    def MN(self) -> int:
        return self.M * self.N

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "FstaConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**{k: None if v in (None, "None", "") else int(v) for k, v in d.items()})


PARAM_NAMES = ("w_s", "b_s", "w_t", "b_t", "w_p", "b_p")


@dataclass
class FstaParams:
    w_s: Tensor  # [M, C, k_s, k_s]
    b_s: Tensor  # [M]
    w_t: Tensor  # [N, 1, k_t]
    b_t: Tensor  # [N]
    w_p: Tensor  # [M*N, C, k_p, k_p]
    b_p: Tensor  # [M*N]

    @staticmethod
    def shapes(cfg: FstaConfig) -> Dict[str, Tuple[int, ...]]:
        return {
            "w_s": (cfg.M, cfg.C, cfg.k_s, cfg.k_s),
            "b_s": (cfg.M,),
            "w_t": (cfg.N, 1, cfg.k_t),
            "b_t": (cfg.N,),
            "w_p": (cfg.MN, cfg.C, cfg.k_p, cfg.k_p),
            "b_p": (cfg.MN,),
        }

    @classmethod
    def init(cls, cfg: FstaConfig, rng: np.random.Generator, dtype=np.float64, requires_grad=False):
        """Fan-in scaled uniform weights, zero biases."""
        out = {}
        for name, shape in cls.shapes(cfg).items():
            if name.startswith("b"):
                arr = np.zeros(shape)
            else:
                bound = math.sqrt(1.0 / int(np.prod(shape[1:])))
                arr = rng.uniform(-bound, bound, size=shape)
            out[name] = Tensor(arr.astype(dtype), requires_grad=requires_grad)
        return cls(**out)

    @classmethod
    def zeros(cls, cfg: FstaConfig, dtype=np.float64, requires_grad=False):
        return cls(
            **{k: Tensor(np.zeros(s, dtype=dtype), requires_grad=requires_grad) for k, s in cls.shapes(cfg).items()}
        )

    def validate(self, cfg: FstaConfig) -> None:
        for name, shape in self.shapes(cfg).items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ConfigError(f"param {name} has shape {t.shape}, config expects {shape}")
            if not np.all(np.isfinite(t.data)):
                raise ConfigError(f"param {name} has non-finite values")

    def tensors(self) -> Dict[str, Tensor]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def named(self, prefix: str = "fsta") -> Dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.tensors().items()}

    @classmethod
    def from_named(cls, entries: Dict[str, Tensor], prefix: str = "fsta", requires_grad=False) -> "FstaParams":
        try:
            return cls(**{k: Tensor(entries[f"{prefix}.{k}"].data, requires_grad=requires_grad) for k in PARAM_NAMES})
        except KeyError as exc:
            raise ConfigError(f"missing parameter entry {exc.args[0]}") from None


@dataclass
class FstaIntermediates:
    A_s: Tensor  # [T, M, HW]
    G_s: Tensor  # [C, M, T]
    x_prime: Tensor  # [1, T]
    A_t: Tensor  # [N, T]
    G_st: Tensor  # [C, M*N]
    A_p: Tensor  # [M*N, HW]
    y_ref: Tensor  # [C, HW]


def _check_input(x: Tensor, cfg: FstaConfig) -> None:
    want = (cfg.T, cfg.C, cfg.H, cfg.W)
    if x.shape != want:
        raise ConfigError(f"input shape {x.shape} does not match config {want}")


def spatial_attention(x: Tensor, params: FstaParams, cfg: FstaConfig) -> Tensor:
    """A_s[t, m, :] = softmax over pixels of the m-th logit map of frame t."""
    _check_input(x, cfg)
    logits = tc.conv2d(x, params.w_s, params.b_s)  # [T, M, H, W]
    return tc.softmax(tc.reshape(logits, (cfg.T, cfg.M, cfg.HW)), axis=2)


def spatial_squeeze(x: Tensor, A_s: Tensor, cfg: FstaConfig) -> Tensor:
    """G_s[c, m, t] = sum over pixels of A_s[t, m, p] * x[t, c, p]."""
    xf = tc.reshape(x, (cfg.T, cfg.C, cfg.HW))
    g = tc.bmm(A_s, tc.permute(xf, (0, 2, 1)))  # [T, M, C]
    return tc.permute(g, (2, 1, 0))


def temporal_attention(x: Tensor, params: FstaParams, cfg: FstaConfig) -> Tuple[Tensor, Tensor]:
    """Pool each frame to one scalar, then softmax over frames of a 1D conv."""
    _check_input(x, cfg)
    pooled = tc.reduce_mean(x, (1, 2, 3))  # [T]
    x_prime = tc.reshape(pooled, (1, cfg.T))
    A_t = tc.softmax(tc.conv1d(x_prime, params.w_t, params.b_t), axis=1)
    return x_prime, A_t


def temporal_squeeze(G_s: Tensor, A_t: Tensor, cfg: FstaConfig) -> Tensor:
    """G_st[c, m*N + n] = sum_t G_s[c, m, t] * A_t[n, t]."""
    if G_s.shape != (cfg.C, cfg.M, cfg.T) or A_t.shape != (cfg.N, cfg.T):
        raise tc.ShapeError(f"temporal_squeeze: got G_s {G_s.shape}, A_t {A_t.shape}")
    flat = tc.reshape(G_s, (cfg.C * cfg.M, cfg.T))
    g = tc.matmul(flat, tc.permute(A_t, (1, 0)))  # [C*M, N]
    return tc.reshape(g, (cfg.C, cfg.MN))


def pixel_distribution(x_ref: Tensor, params: FstaParams, cfg: FstaConfig) -> Tensor:
    """A_p[:, p] = softmax over the M*N combinations at pixel p."""
    if x_ref.shape != (cfg.C, cfg.H, cfg.W):
        raise tc.ShapeError(f"pixel_distribution: x_ref shape {x_ref.shape}")
    logits = tc.conv2d(x_ref, params.w_p, params.b_p)  # [MN, H, W]
    return tc.softmax(tc.reshape(logits, (cfg.MN, cfg.HW)), axis=0)


def distribute(G_st: Tensor, A_p: Tensor) -> Tensor:
    """y[c, p] = sum_k G_st[c, k] * A_p[k, p]."""
    return tc.matmul(G_st, A_p)


def fsta_forward(x: Tensor, params: FstaParams, cfg: FstaConfig) -> Tuple[Tensor, FstaIntermediates]:
    """Fuse window ``x`` [T,C,H,W] into the reference frame's output [C,H,W]."""
    _check_input(x, cfg)
    params.validate(cfg)
    A_s = spatial_attention(x, params, cfg)
    G_s = spatial_squeeze(x, A_s, cfg)
    x_prime, A_t = temporal_attention(x, params, cfg)
    G_st = temporal_squeeze(G_s, A_t, cfg)
    A_p = pixel_distribution(tc.take(x, cfg.ref_index, axis=0), params, cfg)
    y = distribute(G_st, A_p)
    inter = FstaIntermediates(A_s=A_s, G_s=G_s, x_prime=x_prime, A_t=A_t, G_st=G_st, A_p=A_p, y_ref=y)
    return tc.reshape(y, (cfg.C, cfg.H, cfg.W)), inter
