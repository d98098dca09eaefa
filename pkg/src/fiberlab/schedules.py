"""Noise schedules on a uniform integer grid t = 0..T (t=T noisiest, t=0 clean)."""

from __future__ import annotations

import numpy as np


class NoiseSchedule:
    """Per-step signal/noise coefficients for the forward process.

    Variance-preserving: x_t = sqrt(alpha_bar_t) x0 + sigma_t eps with
    sigma_t = sqrt(1 - alpha_bar_t) and a linear beta ramp.
    Variance-exploding: alpha_bar = 1 and sigma_t grows geometrically.
    """

    def __init__(self, kind: str, T: int, sigma: np.ndarray, alpha_bar: np.ndarray):
        if kind not in ("vp", "ve"):
            raise ValueError(f"unknown schedule kind '{kind}'")
        sigma = np.asarray(sigma, dtype=np.float64)
        alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        if sigma.shape != (T + 1,) or alpha_bar.shape != (T + 1,):
            raise ValueError("sigma and alpha_bar must have T+1 entries")
        if sigma[0] > 1e-6:
            raise ValueError("sigma_0 must be ~0")
        if np.any(np.diff(sigma) <= 0):
            raise ValueError("sigma must be strictly increasing in t")
        if np.any(alpha_bar <= 0) or np.any(alpha_bar > 1) or np.any(np.diff(alpha_bar) > 0):
            raise ValueError("alpha_bar must be in (0,1] and non-increasing in t")
        if kind == "vp" and not np.allclose(alpha_bar + sigma**2, 1.0, atol=1e-12):
            raise ValueError("vp schedule requires alpha_bar + sigma^2 == 1")
        if kind == "ve" and not np.all(alpha_bar == 1.0):
            raise ValueError("ve schedule requires alpha_bar == 1")
        self.kind = kind
        self.T = T
        self.sigma = sigma
        self.alpha_bar = alpha_bar

    @classmethod
    def vp_linear(cls, T: int = 100, beta_min: float = 2e-4, beta_max: float = 0.25):
        betas = np.linspace(beta_min, beta_max, T)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        sigma = np.sqrt(1.0 - alpha_bar)
        return cls("vp", T, sigma, alpha_bar)

    @classmethod
    def ve_geometric(cls, T: int = 100, sigma_min: float = 0.01, sigma_max: float = 10.0):
        sigma = np.concatenate([[0.0], np.geomspace(sigma_min, sigma_max, T)])
        return cls("ve", T, sigma, np.ones(T + 1))

    def check_t(self, t: int, low: int = 0):
        if not (low <= t <= self.T):
            raise ValueError(f"step {t} outside [{low}, {self.T}]")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "T": self.T}
        return d


def make_schedule(spec: dict) -> NoiseSchedule:
    """Build a schedule from a config mapping (kind, T, optional ramp params)."""
    kind = spec.get("kind", "vp")
    T = int(spec.get("T", 100))
    if kind == "vp":
        return NoiseSchedule.vp_linear(T, float(spec.get("beta_min", 2e-4)),
                                       float(spec.get("beta_max", 0.25)))
    if kind == "ve":
        return NoiseSchedule.ve_geometric(T, float(spec.get("sigma_min", 0.01)),
                                          float(spec.get("sigma_max", 10.0)))
    raise ValueError(f"unknown schedule kind '{kind}'")


def forward_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    """Draw from the forward process at step t given a clean sample."""
    schedule.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    if t == 0:
        return x0.copy()
    eps = rng.standard_normal(x0.shape)
    return np.sqrt(schedule.alpha_bar[t]) * x0 + schedule.sigma[t] * eps
