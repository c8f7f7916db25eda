"""Forward (noising) process, noise schedules and the denoising objective.

Steps are 1-based: ``k = 1`` is the least noisy step and ``k = T0`` the
noisiest. The network and the guidance schedule see the normalized time
``t_norm = k / T0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete forward-process coefficients over ``num_steps`` steps."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    kind: str = "linear"
    params: tuple = ()

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha_bar(self, k: int) -> float:
        """Cumulative signal fraction at step ``k``; ``alpha_bar(0) == 1``."""
        if k == 0:
            return 1.0
        return float(self.alpha_bars[k - 1])

    def t_norm(self, k):
        return np.asarray(k, dtype=np.float64) / self.num_steps

    def describe(self) -> dict:
        return {"kind": self.kind, "num_steps": self.num_steps, "params": list(self.params)}


def _validate(betas: np.ndarray) -> np.ndarray:
    if not np.all((betas > 0.0) & (betas < 1.0)):
        raise ValueError("betas must lie in (0, 1)")
    alpha_bars = np.cumprod(1.0 - betas)
    if np.any(alpha_bars <= 0.0):
        raise ValueError("alpha_bar underflowed to zero; shorten the schedule")
    return alpha_bars


def make_linear_schedule(T0: int, beta_min: float, beta_max: float) -> NoiseSchedule:
    """Betas interpolated linearly from ``beta_min`` to ``beta_max``."""
    if int(T0) != T0 or T0 < 1:
        raise ValueError(f"T0 must be a positive integer, got {T0!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T0), dtype=np.float64)
    return NoiseSchedule(betas, _validate(betas), "linear", (float(beta_min), float(beta_max)))


def make_cosine_schedule(T0: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule (Nichol & Dhariwal); betas clipped at ``max_beta``."""
    if int(T0) != T0 or T0 < 1:
        raise ValueError(f"T0 must be a positive integer, got {T0!r}")
    if offset < 0 or not (0.0 < max_beta < 1.0):
        raise ValueError("offset must be >= 0 and max_beta in (0, 1)")

    def f(t):
        return math.cos((t / T0 + offset) / (1.0 + offset) * math.pi / 2) ** 2

    betas = np.array([min(1.0 - f(k) / f(k - 1), max_beta) for k in range(1, int(T0) + 1)])
    return NoiseSchedule(betas, _validate(betas), "cosine", (float(offset), float(max_beta)))


def make_schedule(kind: str, T0: int, **kw) -> NoiseSchedule:
    if kind == "linear":
        return make_linear_schedule(T0, kw.get("beta_min", 1e-4), kw.get("beta_max", 0.02))
    if kind == "cosine":
        return make_cosine_schedule(T0, kw.get("offset", 0.008), kw.get("max_beta", 0.999))
    raise ValueError(f"unknown schedule kind {kind!r}")


def schedule_from_description(desc: dict) -> NoiseSchedule:
    kind, T0, params = desc["kind"], int(desc["num_steps"]), desc["params"]
    if kind == "linear":
        return make_linear_schedule(T0, *params)
    if kind == "cosine":
        return make_cosine_schedule(T0, *params)
    raise ValueError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class NoisySample:
    x_t: np.ndarray
    k: int | np.ndarray
    eps: np.ndarray


def q_sample(x0, k, eps, sched: NoiseSchedule) -> NoisySample:
    """Noise ``x0`` to step ``k``. Accepts a single vector or a batch with per-row steps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"dimension mismatch: x0 {x0.shape} vs eps {eps.shape}")
    k_arr = np.asarray(k)
    if np.any(k_arr < 1) or np.any(k_arr > sched.num_steps):
        raise ValueError(f"step out of range [1, {sched.num_steps}]: {k}")
    ab = sched.alpha_bars[k_arr - 1]
    if k_arr.ndim:
        ab = ab[:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return NoisySample(x_t, k, eps)


Predictor = Callable[[np.ndarray, np.ndarray, Sequence], np.ndarray]


def denoising_loss(model, batch: Sequence, sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """Mean over the batch of ``||eps_pred - eps||^2``.

    ``model`` is a :class:`sag.model.Denoiser` or any callable
    ``f(x_t, t_norm, conditions) -> eps_pred`` on batched arrays.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    x0 = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    conds = [c for _, c in batch]
    k = rng.integers(1, sched.num_steps + 1, size=len(batch))
    eps = rng.standard_normal(x0.shape)
    noisy = q_sample(x0, k, eps, sched)
    if callable(model):
        pred = model(noisy.x_t, sched.t_norm(k), conds)
    else:
        from sag.model import forward

        pred = forward(model, noisy.x_t, sched.t_norm(k), conds)
    return float(np.mean(np.sum((pred - eps) ** 2, axis=1)))
