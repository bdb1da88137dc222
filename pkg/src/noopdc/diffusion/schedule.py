from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ndgrad import Tensor
from ..ndgrad import functional as F


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule. Timesteps are 1-based: ``alpha_bar_at(1)`` is the first entry."""

    T: int
    betas: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def coefficients(self, t: int) -> tuple:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))."""
        ab = self.alpha_bar_at(t)
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bar=alpha_bar)


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> Tensor:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, differentiable in both x0 and eps.

    ``t`` may be a scalar timestep or one timestep per batch row.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0))
    eps = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=x0.dtype))
    if x0.shape != eps.shape and np.broadcast_shapes(x0.shape, eps.shape) != x0.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match noise shape {eps.shape}")
    if np.ndim(t) == 0:
        a, s = sched.coefficients(t)
        return F.add(F.scale(x0, a), F.scale(eps, s))
    t = np.asarray(t)
    if t.shape != (x0.shape[0],):
        raise ValueError(f"per-sample timesteps need shape ({x0.shape[0]},), got {t.shape}")
    if t.min() < 1 or t.max() > sched.T:
        raise ValueError(f"timesteps outside [1, {sched.T}]")
    ab = sched.alpha_bar[t - 1]
    bshape = (-1,) + (1,) * (x0.ndim - 1)
    a = np.sqrt(ab).astype(x0.dtype).reshape(bshape)
    s = np.sqrt(1.0 - ab).astype(x0.dtype).reshape(bshape)
    return F.add(F.mul(x0, a), F.mul(eps, s))
