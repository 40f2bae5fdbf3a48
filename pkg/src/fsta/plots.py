"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PathLike = Union[str, Path]


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.6)


def plot_cost(rows: Sequence[dict], path: PathLike) -> Path:
    """Dense vs. factorized attention elements against H*W (log-log)."""
    rows = sorted(rows, key=lambda r: r["H"] * r["W"])
    hw = [r["H"] * r["W"] for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax0.loglog(hw, [r["dense_affinity_elems"] for r in rows], "o-", label="dense (THW)$^2$")
    ax0.loglog(hw, [r["fsta_attention_elems"] for r in rows], "s-", label="factorized")
    measured = [(h, r["measured_peak_elems"]) for h, r in zip(hw, rows) if r.get("measured_peak_elems")]
    if measured:
        ax0.loglog(*zip(*measured), "x", color="k", label="measured peak")
    ax0.set_xlabel("H*W")
    ax0.set_ylabel("attention elements")
    ax0.legend(frameon=False, fontsize=8)
    _style(ax0)
    ax1.semilogx(hw, [r["ratio"] for r in rows], "o-", color="C2")
    ax1.set_xlabel("H*W")
    ax1.set_ylabel("dense / factorized")
    _style(ax1)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(curve: Sequence[Tuple[int, float, float]], path: PathLike, window: int = 50) -> Path:
    """Per-step loss with a trailing moving average."""
    steps = [c[0] for c in curve]
    loss = [c[1] for c in curve]
    smooth = []
    acc = 0.0
    for i, v in enumerate(loss):
        acc += v
        if i >= window:
            acc -= loss[i - window]
        smooth.append(acc / min(i + 1, window))
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.plot(steps, loss, color="0.75", linewidth=0.6, label="loss")
    ax.plot(steps, smooth, color="C0", label=f"{window}-step mean")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
