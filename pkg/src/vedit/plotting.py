"""Figures for the ``report`` and ``ablate`` commands (written to files, never shown)."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def ema(values: Sequence[float], decay: float = 0.9) -> np.ndarray:
    out = np.empty(len(values))
    acc = None
    for i, v in enumerate(values):
        acc = v if acc is None else decay * acc + (1 - decay) * v
        out[i] = acc
    return out


def read_loss_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no loss rows")
    return np.array([int(r["step"]) for r in rows]), np.array([float(r["loss"]) for r in rows])


def plot_loss(steps, losses, out, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=0.6, alpha=0.4, color="C0", label="loss")
    ax.plot(steps, ema(losses), lw=1.5, color="C0", label="EMA 0.9")
    ax.set_xlabel("step")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def plot_bars(labels: Sequence[str], values: Sequence[float], out, ylabel: str, title: str = "",
              baseline: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(labels), 3.2))
    ax.bar(range(len(labels)), values, color=[f"C{i}" for i in range(len(labels))])
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    if baseline is not None:
        ax.axhline(baseline, ls="--", lw=1, color="k", label="do-nothing")
        ax.legend(frameon=False)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def plot_frames(rows: Sequence[np.ndarray], row_labels: Sequence[str], out) -> Path:
    """Grid of videos, one row each, frames ``(T, C, H, W)`` in ``[0, 1]``."""
    T = max(len(r) for r in rows)
    fig, axes = plt.subplots(len(rows), T, figsize=(1.1 * T, 1.2 * len(rows)), squeeze=False)
    for i, video in enumerate(rows):
        for j in range(T):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(video):
                f = np.clip(video[j], 0, 1)
                if f.shape[0] == 1:
                    ax.imshow(f[0], cmap="gray", vmin=0, vmax=1)
                else:
                    ax.imshow(f.transpose(1, 2, 0))
        axes[i, 0].set_ylabel(row_labels[i], fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)
