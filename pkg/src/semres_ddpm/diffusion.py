"""Gaussian diffusion: linear beta schedule, forward noising, simple loss, ancestral sampling.

Timesteps are 1-based throughout (``t`` in ``1..T``); arrays on the
schedule are stored 0-based, so step ``t`` lives at index ``t - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neuralcore import NonFiniteError


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def T(self) -> int:
        return len(self.beta)

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def _idx(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep outside [1, {self.T}]")
        return t - 1


def linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, beta_tilde):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, beta_tilde, float(beta_start), float(beta_end))


def scaled_linear_schedule(T: int) -> NoiseSchedule:
    """Linear schedule whose endpoints are the T=1000 defaults rescaled by 1000/T.

    Keeps the terminal ``alpha_bar`` near zero when fewer steps are used.
    """
    scale = 1000.0 / T
    return linear_schedule(T, min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999))


def q_sample(S0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) S0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one step per row."""
    ab = schedule.alpha_bar[schedule._idx(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * S0 + np.sqrt(1.0 - ab) * eps


def simple_loss(denoiser, S0: np.ndarray, t: np.ndarray, eps: np.ndarray,
                schedule: NoiseSchedule, return_grad: bool = False):
    """Mean squared error between ``eps`` and the denoiser's prediction.

    With ``return_grad`` the gradient w.r.t. the prediction is returned as
    well, so a caller can run ``denoiser.backward`` on it.
    """
    if S0.shape != eps.shape or np.shape(t) not in ((), (S0.shape[0],)):
        raise ValueError("batch shapes disagree")
    pred = denoiser(q_sample(S0, t, eps, schedule), t)
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite diffusion loss")
    if return_grad:
        return loss, 2.0 * diff / diff.size
    return loss


def p_mean(denoiser, St: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    i = schedule._idx(t)
    coef = schedule.beta[i] / np.sqrt(1.0 - schedule.alpha_bar[i])
    return (St - coef * denoiser(St, t)) / np.sqrt(schedule.alpha[i])


def p_sample_step(denoiser, St: np.ndarray, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """One reverse step with fixed variance ``beta_tilde_t``.

    Noise is always drawn (even at t=1, where it is multiplied by zero) so a
    shared rng stream stays aligned across models.
    """
    mu = p_mean(denoiser, St, t, schedule)
    xi = rng.standard_normal(St.shape)
    return mu + np.sqrt(schedule.beta_tilde[schedule._idx(t)]) * xi


def reverse_chain(denoiser, St: np.ndarray, t_start: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    x = St
    for t in range(t_start, 0, -1):
        x = p_sample_step(denoiser, x, t, schedule, rng)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite values after reverse step t={t}")
    return x


def sample(denoiser, n: int, d: int, schedule: NoiseSchedule, rng: np.random.Generator,
           batch_size: int | None = None) -> np.ndarray:
    """Ancestral sampling from pure noise, ``t = T .. 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ST = rng.standard_normal((n, d))
    if batch_size is None or batch_size >= n:
        return reverse_chain(denoiser, ST, schedule.T, schedule, rng)
    parts = [reverse_chain(denoiser, ST[i:i + batch_size], schedule.T, schedule, rng)
             for i in range(0, n, batch_size)]
    return np.vstack(parts)
