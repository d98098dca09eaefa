"""Posterior-mean estimation and reverse-process sampling.

The one-shot denoised estimate from a score s(x_t, t) is
x_t + sigma_t^2 s for variance-exploding schedules and
(x_t + sigma_t^2 s) / sqrt(alpha_bar_t) for variance-preserving ones.
"""

from __future__ import annotations

import numpy as np

from .numerics.tensor import Tensor
from .schedules import NoiseSchedule


def tweedie_estimate(x_t, t: int, score_model, schedule: NoiseSchedule) -> Tensor:
    """Posterior-mean reconstruction E[x0 | x_t]; differentiable in x_t."""
    schedule.check_t(t, low=1)
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    s = score_model.score(x, t)
    if s.shape != x.shape:
        raise ValueError(f"score shape {s.shape} != input shape {x.shape}")
    est = x + (schedule.sigma[t] ** 2) * s
    if schedule.kind == "vp":
        est = est * (1.0 / np.sqrt(schedule.alpha_bar[t]))
    return est


def denoise_step(x_t: np.ndarray, t: int, score_model, schedule: NoiseSchedule,
                 mode: str = "ode", rng: np.random.Generator | None = None) -> np.ndarray:
    """One reverse step t -> t-1.

    "ode" is the deterministic probability-flow update; "ancestral" adds the
    posterior noise. Both re-evaluate the score at the given x_t.
    """
    if t < 1:
        raise ValueError("denoise_step requires t >= 1")
    schedule.check_t(t)
    if mode not in ("ode", "ancestral"):
        raise ValueError(f"unknown mode '{mode}'")
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = tweedie_estimate(Tensor(x_t), t, score_model, schedule).data
    a_prev = schedule.alpha_bar[t - 1]
    s_prev, s_cur = schedule.sigma[t - 1], schedule.sigma[t]
    eps_hat = (x_t - np.sqrt(schedule.alpha_bar[t]) * x0_hat) / s_cur
    if mode == "ode":
        noise_std = 0.0
    else:
        if schedule.kind == "vp":
            noise_std = s_prev / s_cur * np.sqrt(1.0 - schedule.alpha_bar[t] / a_prev)
        else:
            noise_std = s_prev * np.sqrt(s_cur**2 - s_prev**2) / s_cur
    dir_coef = np.sqrt(max(s_prev**2 - noise_std**2, 0.0))
    out = np.sqrt(a_prev) * x0_hat + dir_coef * eps_hat
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("ancestral mode needs an rng")
        out = out + noise_std * rng.standard_normal(x_t.shape)
    return out


def init_noise(shape, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Terminal-time draw: N(0, I) for vp, N(0, sigma_T^2 I) for ve."""
    x = rng.standard_normal(shape)
    if schedule.kind == "ve":
        x = x * schedule.sigma[schedule.T]
    return x


def sample_prior(score_model, schedule: NoiseSchedule, rng: np.random.Generator,
                 shape, mode: str = "ode") -> np.ndarray:
    """Unguided reverse trajectory from pure noise down to t=0."""
    x = init_noise(shape, schedule, rng)
    for t in range(schedule.T, 0, -1):
        x = denoise_step(x, t, score_model, schedule, mode=mode, rng=rng)
    return x


def dsm_loss(denoiser, batch: np.ndarray, rng: np.random.Generator) -> Tensor:
    """Denoising score-matching loss (noise-prediction MSE) on one batch.

    Draws a step t in [1, T] and noise per item; the scalar result is
    differentiable w.r.t. the denoiser parameters.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be non-empty with shape (n, dim)")
    schedule = denoiser.schedule
    n = batch.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(batch.shape)
    x_t = (np.sqrt(schedule.alpha_bar[t])[:, None] * batch
           + schedule.sigma[t][:, None] * eps)
    pred = denoiser.epsilon(Tensor(x_t), t)
    return ((pred - Tensor(eps)) ** 2).mean()
