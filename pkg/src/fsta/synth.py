"""Seeded synthetic sharp/blurred video pairs.

A static smooth background carries anti-aliased rectangles and discs moving
on straight lines. Frame ``f`` is rendered at time ``f``; its blurred
counterpart averages ``E`` renders spread uniformly over one frame interval
centred on ``f`` (a temporal box filter, i.e. motion blur).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from .tensor import Tensor


class SynthConfigError(ValueError):
    pass


@dataclass
class SyntheticSequence:
    sharp: Tensor  # [F, C, H, W]
    blurred: Tensor  # [F, C, H, W]
    meta: Dict[str, object] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.sharp.shape[0]


def _coverage_disc(yy, xx, cy, cx, r):
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(r - d + 0.5, 0.0, 1.0)


def _coverage_rect(yy, xx, cy, cx, hh, hw):
    cov_y = np.clip(hh - np.abs(yy - cy) + 0.5, 0.0, 1.0)
    cov_x = np.clip(hw - np.abs(xx - cx) + 0.5, 0.0, 1.0)
    return cov_y * cov_x


def _render(t: float, background, objects, yy, xx) -> np.ndarray:
    img = background.copy()
    for obj in objects:
        cy = obj["y0"] + obj["vy"] * t
        cx = obj["x0"] + obj["vx"] * t
        if obj["kind"] == "disc":
            a = _coverage_disc(yy, xx, cy, cx, obj["r"])
        else:
            a = _coverage_rect(yy, xx, cy, cx, obj["hh"], obj["hw"])
        a = a[None]
        img = img * (1.0 - a) + obj["color"][:, None, None] * a
    # quantize to float32 so averaging identical renders reproduces them exactly
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def generate(
    seed: int,
    F: int,
    H: int,
    W: int,
    num_objects: int = 10,
    vmax: float = 3.0,
    E: int = 9,
    channels: int = 1,
) -> SyntheticSequence:
    """Render ``F`` frames of ``channels`` x ``H`` x ``W`` with ``num_objects`` movers.

    Velocities are uniform in [-vmax, vmax] px/frame per axis, drawn as
    unit-range variates scaled by ``vmax`` so changing ``vmax`` with a fixed
    seed changes only the speed of the same scene.
    """
    if F < 1 or H < 1 or W < 1 or E < 1 or channels < 1 or num_objects < 0:
        raise SynthConfigError(f"invalid sizes F={F} H={H} W={W} E={E} C={channels} objects={num_objects}")
    if vmax < 0:
        raise SynthConfigError(f"vmax must be non-negative, got {vmax}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")

    # low-frequency background: a few random sinusoids
    background = np.zeros((channels, H, W))
    for c in range(channels):
        base = rng.uniform(0.2, 0.5)
        wave = np.zeros((H, W))
        for _ in range(3):
            fy, fx = rng.uniform(-2.0, 2.0, size=2) * np.pi / max(H, W)
            wave += rng.uniform(0.03, 0.1) * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
        background[c] = base + wave

    t_mid = (F - 1) / 2.0
    objects = []
    for _ in range(num_objects):
        kind = "disc" if rng.random() < 0.5 else "rect"
        size = rng.uniform(0.08, 0.22) * min(H, W)
        vy, vx = rng.uniform(-1.0, 1.0, size=2) * vmax
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        objects.append(
            {
                "kind": kind,
                "r": size,
                "hh": size * rng.uniform(0.5, 1.0),
                "hw": size * rng.uniform(0.5, 1.0),
                "vy": vy,
                "vx": vx,
                "y0": cy - vy * t_mid,
                "x0": cx - vx * t_mid,
                "color": rng.uniform(0.0, 1.0, size=channels),
            }
        )

    offsets = (np.arange(E) - (E - 1) / 2.0) / E
    sharp = np.empty((F, channels, H, W), dtype=np.float32)
    blurred = np.empty((F, channels, H, W), dtype=np.float32)
    for f in range(F):
        sharp[f] = _render(float(f), background, objects, yy, xx)
        acc = np.zeros((channels, H, W))
        for off in offsets:
            acc += _render(f + off, background, objects, yy, xx)
        blurred[f] = acc / E
    if E == 1:
        blurred = sharp.copy()
    meta = {"seed": seed, "num_objects": num_objects, "vmax": vmax, "exposure_samples": E, "F": F, "H": H, "W": W}
    return SyntheticSequence(Tensor(sharp), Tensor(blurred), meta)


def window(seq: SyntheticSequence, center_index: int, T: int, source: str = "blurred") -> Tensor:
    """``T`` consecutive frames centred on ``center_index``: [T, C, H, W]."""
    lo = center_index - T // 2
    hi = lo + T
    if T < 1 or lo < 0 or hi > seq.num_frames:
        raise IndexError(f"window [{lo}, {hi}) outside sequence of {seq.num_frames} frames")
    frames = getattr(seq, source).data
    return Tensor(frames[lo:hi])


def valid_centers(num_frames: int, T: int) -> List[int]:
    return list(range(T // 2, num_frames - (T - 1 - T // 2)))


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Binary P5 greyscale, maxval 255; values are clipped to [0, 1]."""
    img = np.asarray(image)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"PGM holds one channel, got {img.shape[0]}")
        img = img[0]
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", raw)
    if m is None:
        raise ValueError("expected binary P5 PGM with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(raw[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


def sequence_entries(seq: SyntheticSequence) -> Dict[str, Tensor]:
    """Named-archive entries for a sequence; metadata travels as a JSON sidecar."""
    return {"sharp": seq.sharp, "blurred": seq.blurred}
