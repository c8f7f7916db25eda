"""Guidance algebra: classifier-free guidance, weak CFG and their dual composition.

The affine combinations are written in difference form, ``a + w * (a - b)``,
so that ``a == b`` gives back ``a`` bit-for-bit. At ``w == -1`` the weak-CFG
output is exactly the subject-agnostic prediction and is returned as such.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

MODES = ("cfg_only", "dcfg")


def piecewise_weight(r: float, T: float, t_norm: float) -> float:
    return r if t_norm <= T else -1.0


# Extension hook: name -> f(r, T, t_norm). Only "piecewise" is validated.
WEIGHT_SCHEDULES: dict[str, Callable[[float, float, float], float]] = {"piecewise": piecewise_weight}


@dataclass(frozen=True)
class GuidanceSpec:
    w: float = 7.5
    r: float = 0.0
    T: float = 0.9
    mode: str = "dcfg"
    schedule: str = "piecewise"

    def __post_init__(self):
        if not self.w >= 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if not self.r >= -1:
            raise ValueError(f"r must be >= -1, got {self.r}")
        if not 0 <= self.T <= 1:
            raise ValueError(f"T must lie in [0, 1], got {self.T}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.schedule not in WEIGHT_SCHEDULES:
            raise ValueError(f"unknown weight schedule {self.schedule!r}")


@dataclass(frozen=True)
class GuidedPrediction:
    eps_c: np.ndarray
    eps_c0: np.ndarray | None
    eps_null: np.ndarray
    w_t: float | None
    eps_bar: np.ndarray
    eps_tilde: np.ndarray


def weight_at(spec: GuidanceSpec, t_norm: float) -> float:
    """Weak-CFG weight: ``r`` for ``t <= T``, ``-1`` for ``t > T``."""
    if not 0.0 <= t_norm <= 1.0:
        raise ValueError(f"t_norm must lie in [0, 1], got {t_norm}")
    return float(WEIGHT_SCHEDULES[spec.schedule](spec.r, spec.T, t_norm))


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def cfg(eps_c, eps_null, w: float) -> np.ndarray:
    """``(1 + w) * eps_c - w * eps_null``."""
    eps_c, eps_null = _pair(eps_c, eps_null)
    return eps_c + w * (eps_c - eps_null)


def weak_cfg(eps_c, eps_c0, w_t: float) -> np.ndarray:
    """``(1 + w_t) * eps_c - w_t * eps_c0``."""
    eps_c, eps_c0 = _pair(eps_c, eps_c0)
    if w_t < -1:
        raise ValueError(f"w_t must be >= -1, got {w_t}")
    if w_t == -1:
        return eps_c0.copy()
    return eps_c + w_t * (eps_c - eps_c0)


def dcfg(eps_c, eps_c0, eps_null, spec: GuidanceSpec, t_norm: float) -> GuidedPrediction:
    """Weak CFG between c and c0, then null CFG with ``spec.w``."""
    eps_c, eps_c0 = _pair(eps_c, eps_c0)
    _, eps_null = _pair(eps_c, eps_null)
    w_t = weight_at(spec, t_norm)
    eps_bar = weak_cfg(eps_c, eps_c0, w_t)
    return GuidedPrediction(eps_c, eps_c0, eps_null, w_t, eps_bar, cfg(eps_bar, eps_null, spec.w))


def guide(eps_c, eps_c0, eps_null, spec: GuidanceSpec, t_norm: float) -> GuidedPrediction:
    """Dispatch on ``spec.mode``; ``cfg_only`` ignores ``eps_c0``."""
    if spec.mode == "dcfg":
        if eps_c0 is None:
            raise ValueError("dcfg mode needs the subject-agnostic prediction")
        return dcfg(eps_c, eps_c0, eps_null, spec, t_norm)
    eps_c, eps_null = _pair(eps_c, eps_null)
    return GuidedPrediction(eps_c, None, eps_null, None, eps_c, cfg(eps_c, eps_null, spec.w))
