"""Noise schedules, the forward noising process and DDIM reverse steps.

Timesteps are 0-indexed here (``t`` in ``[0, T)``); the CLI shows them
1-indexed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import Tensor, ShapeError

DEFAULT_T = 50
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        beta = np.asarray(betas, dtype=np.float64).copy()
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((beta > 0) & (beta < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return t


def linear_beta_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                         beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        return NoiseSchedule.from_betas([beta_start])
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _combine(a: float, x: Tensor, b: float, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch {list(x.shape)} vs {list(y.shape)}")
    dt = x.dtype.type
    return Tensor(dt(a) * x.data + dt(b) * y.data, dtype=x.dtype)


def q_step(z_prev: Tensor, t: int, noise: Tensor, s: NoiseSchedule) -> Tensor:
    """One forward Markov step: ``sqrt(1-beta_t) z_prev + sqrt(beta_t) noise``."""
    t = s.check_t(t)
    return _combine(np.sqrt(1.0 - s.beta[t]), z_prev, np.sqrt(s.beta[t]), noise)


def q_sample(z0: Tensor, t: int, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """Closed-form noising straight from ``z0`` to step ``t``."""
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    return _combine(np.sqrt(ab), z0, np.sqrt(1.0 - ab), eps)


def predict_x0(z_t: Tensor, eps_hat: Tensor, t: int, s: NoiseSchedule) -> Tensor:
    t = s.check_t(t)
    ab = s.alpha_bar[t]
    return _combine(1.0 / np.sqrt(ab), z_t, -np.sqrt(1.0 - ab) / np.sqrt(ab), eps_hat)


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int, s: NoiseSchedule) -> Tensor:
    """Deterministic DDIM move from ``t`` to ``t_prev``; ``t_prev < 0`` returns the x0 estimate."""
    t = s.check_t(t)
    if t_prev >= t:
        raise ValueError(f"ddim_step needs t_prev < t, got t={t}, t_prev={t_prev}")
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"eps_hat shape {list(eps_hat.shape)} != z_t shape {list(z_t.shape)}")
    # float64 coefficients, one rounding per output element
    ab = s.alpha_bar[t]
    x0_z = 1.0 / np.sqrt(ab)
    x0_e = -np.sqrt(1.0 - ab) / np.sqrt(ab)
    if t_prev < 0:
        a, b = x0_z, x0_e
    else:
        abp = s.alpha_bar[t_prev]
        a = np.sqrt(abp) * x0_z
        b = np.sqrt(abp) * x0_e + np.sqrt(1.0 - abp)
    out = a * z_t.data.astype(np.float64) + b * eps_hat.data.astype(np.float64)
    return Tensor(out.astype(z_t.dtype), dtype=z_t.dtype)


def sampling_timesteps(T: int, n_steps: int) -> list[int]:
    """Evenly spaced descending timesteps from ``T-1`` down to 0 (deduplicated)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if n_steps == 1:
        return [T - 1]
    raw = np.round(np.linspace(T - 1, 0, min(n_steps, T))).astype(int)
    out: list[int] = []
    for t in raw:
        if not out or t < out[-1]:
            out.append(int(t))
    return out


def default_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """Linear schedule with the reference endpoints rescaled by ``1000 / T``.

    The 1e-4..2e-2 endpoints are tuned for 1000 steps; at T=50 they would end
    with alpha_bar ~ 0.6, far from the pure noise that sampling starts from.
    """
    k = 1000.0 / T
    return linear_beta_schedule(T, min(DEFAULT_BETA_START * k, 0.5), min(DEFAULT_BETA_END * k, 0.999))
