"""Toy encoder-decoder deblurring network with a pluggable fusion block.

Every frame of the window goes through one shared encoder (dense blocks,
average-pool downsampling). Dense blocks sit at every level below full
resolution; at full resolution narrow convolutions are memory-bound and
dominate the cost. The bottleneck features of all frames are fused into one
map for the reference frame, which the decoder upsamples with skip
connections from the reference frame only. The output adds a predicted
correction to the blurred reference frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List

import numpy as np

from . import tensor as tc
from .attention import ConfigError, FstaConfig, FstaParams, fsta_forward
from .baseline import DenseNonLocalParams, dense_nonlocal_forward
from .tensor import Tensor

FUSION_MODES = ("fsta", "dense_nonlocal", "average", "single_frame")
DENSE_LAYERS = 3


@dataclass(frozen=True)
class NetConfig:
    T: int = 5
    image_channels: int = 1
    base_channels: int = 16
    depth: int = 2
    dense_growth: int = 8
    fusion_mode: str = "fsta"
    M: int = 4
    N: int = 4
    k_s: int = 3
    k_t: int = 3
    k_p: int = 3

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.T < 1 or self.depth < 0 or self.base_channels < 1 or self.dense_growth < 1:
            raise ConfigError(f"invalid network config {self}")

    @property
    def ref_index(self) -> int:
        return self.T // 2

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def fsta_config(self, H: int, W: int) -> FstaConfig:
        """FSTA geometry at the bottleneck for an input of H x W."""
        f = 2**self.depth
        if H % f or W % f:
            raise ConfigError(f"extents {H}x{W} must be divisible by 2^depth = {f}")
        return FstaConfig(
            T=self.T, M=self.M, N=self.N, C=self.channels(self.depth), H=H // f, W=W // f,
            k_s=self.k_s, k_t=self.k_t, k_p=self.k_p, ref_index=self.ref_index,
        )

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, object]) -> "NetConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown net config keys {sorted(unknown)}")
        return cls(**{k: (str(v) if k == "fusion_mode" else int(v)) for k, v in d.items()})


def _conv_shapes(prefix: str, c_in: int, c_out: int, k: int) -> Dict[str, tuple]:
    return {f"{prefix}.w": (c_out, c_in, k, k), f"{prefix}.b": (c_out,)}


def _dense_block_shapes(prefix: str, c: int, growth: int) -> Dict[str, tuple]:
    out = {}
    for j in range(DENSE_LAYERS):
        out.update(_conv_shapes(f"{prefix}.dense.{j}", c + j * growth, growth, 3))
    out.update(_conv_shapes(f"{prefix}.trans", c + DENSE_LAYERS * growth, c, 1))
    return out


def param_shapes(cfg: NetConfig) -> Dict[str, tuple]:
    """Shapes of every backbone parameter, in a fixed order (fusion params excluded)."""
    shapes = dict(_conv_shapes("head", cfg.image_channels, cfg.channels(0), 3))
    for i in range(cfg.depth):
        if i > 0:
            shapes.update(_dense_block_shapes(f"enc.{i}", cfg.channels(i), cfg.dense_growth))
        shapes.update(_conv_shapes(f"enc.{i}.down", cfg.channels(i), cfg.channels(i + 1), 3))
    shapes.update(_dense_block_shapes("mid", cfg.channels(cfg.depth), cfg.dense_growth))
    for i in reversed(range(cfg.depth)):
        shapes.update(_conv_shapes(f"dec.{i}.up", cfg.channels(i + 1), cfg.channels(i), 3))
        if i > 0:
            shapes.update(_dense_block_shapes(f"dec.{i}", cfg.channels(i), cfg.dense_growth))
    shapes.update(_conv_shapes("tail", cfg.channels(0), cfg.image_channels, 3))
    return shapes


def _fusion_shapes(cfg: NetConfig) -> Dict[str, tuple]:
    c = cfg.channels(cfg.depth)
    if cfg.fusion_mode == "fsta":
        # H, W do not enter parameter shapes
        fc = FstaConfig(T=cfg.T, M=cfg.M, N=cfg.N, C=c, H=1, W=1, k_s=cfg.k_s, k_t=cfg.k_t, k_p=cfg.k_p)
        return {f"fsta.{k}": s for k, s in FstaParams.shapes(fc).items()}
    if cfg.fusion_mode == "dense_nonlocal":
        return {f"nl.{k}": s for k, s in DenseNonLocalParams.shapes(c).items()}
    return {}


def all_param_shapes(cfg: NetConfig) -> Dict[str, tuple]:
    shapes = param_shapes(cfg)
    shapes.update(_fusion_shapes(cfg))
    return shapes


def init_params(cfg: NetConfig, seed: int, dtype=np.float32, requires_grad: bool = True) -> Dict[str, Tensor]:
    """Fan-in uniform weights, zero biases; the output conv starts at zero so
    the untrained network returns its blurred reference frame."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in all_param_shapes(cfg).items():
        if name.endswith(".b") or name.split(".")[-1].startswith("b_") or name.startswith("tail"):
            arr = np.zeros(shape)
        else:
            bound = math.sqrt(1.0 / int(np.prod(shape[1:])))
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=requires_grad)
    return params


def zero_params(cfg: NetConfig, dtype=np.float32, requires_grad: bool = False) -> Dict[str, Tensor]:
    return {k: Tensor(np.zeros(s, dtype=dtype), requires_grad=requires_grad) for k, s in all_param_shapes(cfg).items()}


def check_params(params: Dict[str, Tensor], cfg: NetConfig) -> None:
    for name, shape in all_param_shapes(cfg).items():
        if name not in params:
            raise ConfigError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def _conv(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return tc.conv2d(x, params[f"{prefix}.w"], params[f"{prefix}.b"])


def _dense_block(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    feats = x
    for j in range(DENSE_LAYERS):
        new = tc.silu(_conv(feats, params, f"{prefix}.dense.{j}"))
        feats = tc.concat([feats, new], axis=1)
    return tc.add(x, _conv(feats, params, f"{prefix}.trans"))


def fuse(features: Tensor, mode: str, params: Dict[str, Tensor], cfg: NetConfig) -> Tensor:
    """Combine bottleneck features [T,C,h,w] into one map [C,h,w] for the reference frame."""
    ref = cfg.ref_index
    if mode == "single_frame":
        return tc.take(features, ref, axis=0)
    if mode == "average":
        return tc.reduce_mean(features, (0,))
    if mode == "fsta":
        t, c, h, w = features.shape
        fcfg = FstaConfig(T=t, M=cfg.M, N=cfg.N, C=c, H=h, W=w, k_s=cfg.k_s, k_t=cfg.k_t, k_p=cfg.k_p, ref_index=ref)
        fp = FstaParams(**{k: params[f"fsta.{k}"] for k in ("w_s", "b_s", "w_t", "b_t", "w_p", "b_p")})
        y, _ = fsta_forward(features, fp, fcfg)
        return tc.add(tc.take(features, ref, axis=0), y)
    if mode == "dense_nonlocal":
        nl = DenseNonLocalParams(**{k: params[f"nl.{k}"] for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v")})
        return tc.take(dense_nonlocal_forward(features, nl), ref, axis=0)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def forward_batch(windows: Tensor, params: Dict[str, Tensor], cfg: NetConfig) -> Tensor:
    """Restore the reference frame of each window: [B,T,C,H,W] -> [B,C,H,W]."""
    if windows.ndim != 5 or windows.shape[1] != cfg.T or windows.shape[2] != cfg.image_channels:
        raise ConfigError(f"windows must be [B,{cfg.T},{cfg.image_channels},H,W], got {windows.shape}")
    b, t, c, h, w = windows.shape
    cfg.fsta_config(h, w)  # divisibility check
    ref = cfg.ref_index

    def ref_slice(z: Tensor) -> Tensor:
        return tc.take(tc.reshape(z, (b, t) + z.shape[1:]), ref, axis=1)

    z = tc.silu(_conv(tc.reshape(windows, (b * t, c, h, w)), params, "head"))
    skips: List[Tensor] = []
    for i in range(cfg.depth):
        if i > 0:
            z = _dense_block(z, params, f"enc.{i}")
        skips.append(ref_slice(z))
        z = tc.silu(_conv(tc.avg_pool2(z), params, f"enc.{i}.down"))
    z = _dense_block(z, params, "mid")

    feats = tc.reshape(z, (b, t) + z.shape[1:])
    z = tc.stack([fuse(tc.take(feats, k, axis=0), cfg.fusion_mode, params, cfg) for k in range(b)], axis=0)

    for i in reversed(range(cfg.depth)):
        z = tc.add(tc.silu(_conv(tc.upsample2(z), params, f"dec.{i}.up")), skips[i])
        if i > 0:
            z = _dense_block(z, params, f"dec.{i}")
    correction = _conv(z, params, "tail")
    blurred_ref = tc.take(windows, ref, axis=1)
    return tc.add(blurred_ref, correction)


def forward(window: Tensor, params: Dict[str, Tensor], cfg: NetConfig) -> Tensor:
    """Restore one window [T,C,H,W] -> [C,H,W]."""
    out = forward_batch(tc.reshape(window, (1,) + window.shape), params, cfg)
    return tc.take(out, 0, axis=0)
