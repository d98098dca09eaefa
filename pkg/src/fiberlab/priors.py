"""Gaussian-mixture priors with exact scores under both schedule kinds.

A diagonal GMM convolved with the forward process at step t is again a
diagonal GMM (vp: means scaled by sqrt(alpha_bar), variances
alpha_bar s^2 + sigma^2; ve: variances s^2 + sigma^2), so the score,
density and posterior statistics are available in closed form. These serve
as the verification oracles for everything built on learned models.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .numerics.tensor import Tensor
from .schedules import NoiseSchedule


class GmmPrior:
    def __init__(self, weights, means, stds):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must have matching shapes")
        if self.weights.shape[0] != self.means.shape[0]:
            raise ValueError("one weight per component required")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(self.stds <= 0):
            raise ValueError("stds must be positive")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def noised_params(self, t: int, schedule: NoiseSchedule):
        """Component means/variances of the distribution of x_t."""
        a = schedule.alpha_bar[t]
        means = np.sqrt(a) * self.means
        var = a * self.stds**2 + schedule.sigma[t] ** 2
        return means, var

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.stds[comp] * eps

    def logpdf_t(self, x: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        means, var = self.noised_params(t, schedule)
        lp = np.empty((x.shape[0], self.n_components))
        for k in range(self.n_components):
            d = x - means[k]
            lp[:, k] = (np.log(self.weights[k])
                        - 0.5 * np.sum(d * d / var[k] + np.log(2.0 * np.pi * var[k]), axis=1))
        m = lp.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lp - m).sum(axis=1, keepdims=True)))[:, 0]

    def score_t(self, x, t: int, schedule: NoiseSchedule) -> Tensor:
        """Exact score of the noised mixture; differentiable in x."""
        xt = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = xt.ndim == 1
        if squeeze:
            xt = xt.reshape(1, -1)
        B = xt.shape[0]
        means, var = self.noised_params(t, schedule)
        x3 = xt.reshape(B, 1, self.dim)
        diff = x3 - Tensor(means)  # (B, K, d)
        inv_var = Tensor(1.0 / var)
        quad = (diff * diff * inv_var).sum(axis=2)  # (B, K)
        log_norm = 0.5 * np.sum(np.log(2.0 * np.pi * var), axis=1)  # (K,)
        logits = (-0.5) * quad + Tensor(np.log(self.weights) - log_norm)
        resp = (logits - logits.logsumexp(axis=1, keepdims=True)).exp()  # (B, K)
        contrib = (diff * inv_var) * (-1.0)  # (B, K, d)
        out = (resp.reshape(B, self.n_components, 1) * contrib).sum(axis=1)
        return out.reshape(self.dim) if squeeze else out

    # ---------------------------------------------------------- 1-d helpers

    def cdf1(self, x) -> np.ndarray:
        if self.dim != 1:
            raise ValueError("cdf1 requires a 1-d mixture")
        x = np.asarray(x, dtype=np.float64)[..., None]
        z = (x - self.means[:, 0]) / self.stds[:, 0]
        return (self.weights * ndtr(z)).sum(axis=-1)

    def ppf1(self, u, tol: float = 1e-9) -> np.ndarray:
        """Inverse CDF by bisection."""
        if self.dim != 1:
            raise ValueError("ppf1 requires a 1-d mixture")
        u = np.asarray(u, dtype=np.float64)
        lo = np.full(u.shape, (self.means[:, 0] - 12 * self.stds[:, 0]).min())
        hi = np.full(u.shape, (self.means[:, 0] + 12 * self.stds[:, 0]).max())
        while np.max(hi - lo) > tol:
            mid = 0.5 * (lo + hi)
            below = self.cdf1(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def bin_masses(self, edges: np.ndarray) -> np.ndarray:
        """Probability mass per histogram bin, renormalized over the edges' span."""
        cdf = self.cdf1(edges)
        masses = np.diff(cdf)
        return masses / masses.sum()


class GmmScoreModel:
    """Binds a GmmPrior to a schedule as a ScoreModel."""

    def __init__(self, prior: GmmPrior, schedule: NoiseSchedule):
        self.prior = prior
        self.schedule = schedule

    def score(self, x, t: int) -> Tensor:
        return self.prior.score_t(x, t, self.schedule)


def gmm_score(prior: GmmPrior, x_t, t: int, schedule: NoiseSchedule) -> Tensor:
    """Exact score of the schedule-noised mixture at step t."""
    return prior.score_t(x_t, t, schedule)


def standard_normal_prior(dim: int) -> GmmPrior:
    return GmmPrior([1.0], np.zeros((1, dim)), np.ones((1, dim)))
