"""Frame-consistency measurement with pluggable frame embedders."""
from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

POOL = 8


@dataclass(frozen=True)
class FrameEmbedder:
    """``embed(frame (C, H, W)) -> unit vector``; ``dim`` is fixed per embedder."""

    name: str
    embed: Callable[[np.ndarray], np.ndarray]
    dim: int


def _pool_edges(n: int, k: int) -> np.ndarray:
    return (np.arange(k + 1) * n) // k


def toy_embed(frame) -> np.ndarray:
    """8x8 average-pooled grayscale, mean-centred, L2-normalised (64 dims).

    Bins are ``[floor(i*H/8), floor((i+1)*H/8))`` so sizes not divisible by 8
    still cover every pixel.  A constant frame has no direction left after
    centring and maps to ``e1``.
    """
    f = np.asarray(getattr(frame, "data", frame), dtype=np.float64)
    if f.ndim != 3 or f.shape[1] < POOL or f.shape[2] < POOL:
        raise ValueError(f"toy_embed needs a (C, H, W) frame with H, W >= {POOL}, got {f.shape}")
    gray = f.mean(axis=0)
    ey, ex = _pool_edges(gray.shape[0], POOL), _pool_edges(gray.shape[1], POOL)
    # summed-area table gives every bin sum in one pass
    sat = np.zeros((gray.shape[0] + 1, gray.shape[1] + 1))
    sat[1:, 1:] = gray.cumsum(0).cumsum(1)
    sums = sat[ey[1:, None], ex[None, 1:]] - sat[ey[:-1, None], ex[None, 1:]] \
        - sat[ey[1:, None], ex[None, :-1]] + sat[ey[:-1, None], ex[None, :-1]]
    pooled = (sums / (np.diff(ey)[:, None] * np.diff(ex)[None, :])).ravel()
    v = pooled - pooled.mean()
    n = np.linalg.norm(v)
    if n < 1e-12:
        v = np.zeros(POOL * POOL)
        v[0] = 1.0
        return v
    return v / n


TOY_EMBEDDER = FrameEmbedder("toy8x8", toy_embed, POOL * POOL)


def frame_consistency(video, embedder: FrameEmbedder = TOY_EMBEDDER, adjacent_only: bool = False) -> float:
    """Mean cosine similarity over all unordered frame pairs (or adjacent pairs)."""
    v = np.asarray(getattr(video, "data", video))
    if v.ndim != 4 or len(v) < 2:
        raise ValueError(f"frame_consistency needs a (T, C, H, W) video with T >= 2, got {v.shape}")
    emb = np.stack([embedder.embed(f) for f in v]).astype(np.float64)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    pairs = zip(range(len(v) - 1), range(1, len(v))) if adjacent_only else combinations(range(len(v)), 2)
    sims = [float(emb[i] @ emb[j]) for i, j in pairs]
    return float(np.clip(np.mean(sims), -1.0, 1.0))


def metric_line(video_id: str, metric: str, value: float) -> str:
    return json.dumps({"video_id": video_id, "metric": metric, "value": value})


def read_metric_lines(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
