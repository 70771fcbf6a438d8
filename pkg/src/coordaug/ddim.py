"""Deterministic DDIM: schedules, inversion, reverse steps and guidance.

A schedule holds ``alpha_bar[0..T]``: index ``t`` is the cumulative signal
retention at grid step ``t`` and ``alpha_bar[0]`` belongs to the clean latent.
The denoiser is any object with ``predict(latent, timestep, condition)``
returning a noise estimate of the latent's shape; ``timestep`` is the model
(training) timestep mapped from the grid step, and the empty string is the
unconditional prompt.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import BackendError, NumericError, ValidationError

UNCONDITIONAL = ""

#: epsilon for step t is evaluated at model timestep t (as the inversion formula writes it)
CONVENTION_CURRENT = "current"
#: epsilon for step t is evaluated at model timestep t-1
CONVENTION_PREVIOUS = "previous"


class Denoiser(Protocol):
    def predict(self, latent: np.ndarray, timestep: int, condition: str) -> np.ndarray:
        ...


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    model_timesteps: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        ts = np.asarray(self.model_timesteps, dtype=np.int64)
        if ab.ndim != 1 or ab.size < 1:
            raise ValidationError("alpha_bar must be a non-empty 1-d array")
        if ts.shape != ab.shape:
            raise ValidationError("model_timesteps must align with alpha_bar")
        if not np.all((ab > 0) & (ab <= 1)):
            raise ValidationError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValidationError("alpha_bar must be strictly decreasing in t")
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "model_timesteps", ts)

    @property
    def steps(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def from_alpha_bar(cls, alpha_bar) -> "NoiseSchedule":
        ab = np.asarray(alpha_bar, dtype=np.float64)
        return cls(ab, np.arange(ab.size))


def linear_betas(beta_start: float, beta_end: float, train_steps: int) -> np.ndarray:
    return np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)


def scaled_linear_betas(beta_start: float, beta_end: float, train_steps: int) -> np.ndarray:
    return np.linspace(beta_start**0.5, beta_end**0.5, train_steps, dtype=np.float64) ** 2


def cosine_alpha_bar(train_steps: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    def f(u):
        return np.cos((u + s) / (1 + s) * np.pi / 2) ** 2

    u = np.arange(train_steps + 1) / train_steps
    betas = np.minimum(1 - f(u[1:]) / f(u[:-1]), max_beta)
    return np.cumprod(1.0 - betas)


SCHEDULE_KINDS = ("linear", "scaled_linear", "cosine")


def make_schedule(
    steps: int,
    kind: str = "linear",
    *,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    train_steps: int = 1000,
) -> NoiseSchedule:
    """Subsample a training noise schedule onto ``steps + 1`` evenly spaced timesteps.

    Grid step ``t`` maps to training index ``round(t * (train_steps - 1) / steps)``,
    so step 0 is the first training timestep and step ``steps`` the last.
    """
    if steps < 1:
        raise ValidationError(f"step count must be >= 1, got {steps}")
    if kind == "linear":
        full = np.cumprod(1.0 - linear_betas(beta_start, beta_end, train_steps))
    elif kind == "scaled_linear":
        full = np.cumprod(1.0 - scaled_linear_betas(beta_start, beta_end, train_steps))
    elif kind == "cosine":
        full = cosine_alpha_bar(train_steps)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    idx = np.rint(np.linspace(0, train_steps - 1, steps + 1)).astype(np.int64)
    try:
        return NoiseSchedule(full[idx], idx)
    except ValidationError as exc:
        raise ValidationError(
            f"schedule {kind!r} with {steps} steps over {train_steps} training steps "
            f"is not strictly decreasing: {exc}"
        ) from exc


def _check_finite(z: np.ndarray, t: int, what: str) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NumericError(f"non-finite values in {what} at step t={t}", timestep=t)
    return z


def _predict(denoiser, z, timestep, condition, branch):
    try:
        eps = denoiser.predict(z, int(timestep), condition)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(
            f"denoiser failed on {branch} branch at timestep {timestep}: {exc}",
            backend="denoiser",
            detail=branch,
        ) from exc
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z.shape:
        raise BackendError(
            f"denoiser returned shape {eps.shape} for latent of shape {z.shape}",
            backend="denoiser",
            detail=branch,
        )
    return eps


def ddim_invert_update(z_prev, eps, ab_prev: float, ab_t: float) -> np.ndarray:
    """One inversion update from ``alpha_bar[t-1]`` to ``alpha_bar[t]``."""
    return np.sqrt(ab_t) * (z_prev - np.sqrt(1.0 - ab_prev) * eps) / np.sqrt(ab_prev) + np.sqrt(
        1.0 - ab_t
    ) * eps


def ddim_reverse_update(z_t, eps, ab_t: float, ab_prev: float) -> np.ndarray:
    """One deterministic reverse update from ``alpha_bar[t]`` to ``alpha_bar[t-1]``."""
    return np.sqrt(ab_prev) * (z_t - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t) + np.sqrt(
        1.0 - ab_prev
    ) * eps


def _check_step(t: int, schedule: NoiseSchedule):
    if not 1 <= t <= schedule.steps:
        raise ValidationError(f"step t={t} outside 1..{schedule.steps}")


def invert_step(
    z_prev: np.ndarray,
    t: int,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    condition: str = UNCONDITIONAL,
    convention: str = CONVENTION_CURRENT,
) -> np.ndarray:
    """Map the latent at step ``t-1`` to step ``t``."""
    _check_step(t, schedule)
    if convention == CONVENTION_CURRENT:
        model_t = schedule.model_timesteps[t]
    elif convention == CONVENTION_PREVIOUS:
        model_t = schedule.model_timesteps[t - 1]
    else:
        raise ValidationError(f"unknown inversion time convention {convention!r}")
    z_prev = np.asarray(z_prev, dtype=np.float64)
    eps = _predict(denoiser, z_prev, model_t, condition, "unconditional" if not condition else "conditional")
    ab = schedule.alpha_bar
    return _check_finite(ddim_invert_update(z_prev, eps, ab[t - 1], ab[t]), t, "inversion")


def invert(
    z0: np.ndarray,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    condition: str = UNCONDITIONAL,
    convention: str = CONVENTION_CURRENT,
) -> list[np.ndarray]:
    """Run inversion from the clean latent; returns ``[z_0, z_1, ..., z_T]``."""
    z = _check_finite(np.asarray(z0, dtype=np.float64), 0, "input latent")
    trajectory = [z]
    for t in range(1, schedule.steps + 1):
        z = invert_step(z, t, denoiser, schedule, condition=condition, convention=convention)
        trajectory.append(z)
    return trajectory


def guided_epsilon(
    z: np.ndarray, timestep: int, condition: str, w: float, denoiser: Denoiser
) -> np.ndarray:
    """Classifier-free guidance: ``w * eps(C) + (1 - w) * eps(empty)``."""
    z = np.asarray(z, dtype=np.float64)
    eps_c = _predict(denoiser, z, timestep, condition, "conditional")
    eps_u = _predict(denoiser, z, timestep, UNCONDITIONAL, "unconditional")
    return w * eps_c + (1.0 - w) * eps_u


def sample_step(z_t: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse step from grid step ``t`` to ``t-1`` given ``eps``."""
    _check_step(t, schedule)
    ab = schedule.alpha_bar
    z_t = np.asarray(z_t, dtype=np.float64)
    return _check_finite(ddim_reverse_update(z_t, eps, ab[t], ab[t - 1]), t, "reverse step")


def sample(
    z_T: np.ndarray,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    condition: str = UNCONDITIONAL,
    w: float = 1.0,
) -> np.ndarray:
    """Full guided reverse loop from step ``T`` down to 0."""
    z = np.asarray(z_T, dtype=np.float64)
    for t in range(schedule.steps, 0, -1):
        eps = guided_epsilon(z, schedule.model_timesteps[t], condition, w, denoiser)
        z = sample_step(z, t, eps, schedule)
    return z
