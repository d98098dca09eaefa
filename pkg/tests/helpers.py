"""Shared oracles: finite differences, Gaussian-mixture posterior means."""

import numpy as np

from fiberlab.numerics.tensor import Tensor


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        gflat[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g


def tensor_scalar_fn(tf):
    """Wrap a Tensor->Tensor scalar function into a numpy one for FD checks."""

    def f(x):
        return tf(Tensor(x)).item()

    return f


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom > 0 else 1.0))


def gmm_posterior_mean(weights, means, stds, x_t, t, schedule) -> np.ndarray:
    """Closed-form E[x0 | x_t] for a diagonal GMM prior.

    Independent of the score-based path: uses per-component Gaussian
    posterior means weighted by the noised-component responsibilities.
    """
    weights = np.asarray(weights, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
    x_t = np.asarray(x_t, dtype=np.float64)
    a = schedule.alpha_bar[t]
    sig2 = schedule.sigma[t] ** 2
    K = weights.shape[0]
    logr = np.zeros(K)
    post = np.zeros((K, x_t.size))
    for k in range(K):
        var_k = a * stds[k] ** 2 + sig2  # marginal variance of x_t, comp k
        d = x_t - np.sqrt(a) * means[k]
        logr[k] = np.log(weights[k]) - 0.5 * np.sum(d * d / var_k + np.log(2 * np.pi * var_k))
        # x0 | x_t, k: precision-weighted combination
        prec = 1.0 / stds[k] ** 2 + a / sig2
        post[k] = (means[k] / stds[k] ** 2 + np.sqrt(a) * x_t / sig2) / prec
    logr -= logr.max()
    r = np.exp(logr)
    r /= r.sum()
    return (r[:, None] * post).sum(axis=0)


def gmm_posterior_mean_quadrature(weights, means, stds, x_t, t, schedule,
                                  n_grid: int = 40001) -> float:
    """1-d E[x0 | x_t] by direct numerical integration over x0."""
    weights = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64).ravel()
    stds = np.asarray(stds, dtype=np.float64).ravel()
    a = schedule.alpha_bar[t]
    sig = schedule.sigma[t]
    lo = (means - 14 * stds).min()
    hi = (means + 14 * stds).max()
    x0 = np.linspace(lo, hi, n_grid)
    prior = np.zeros_like(x0)
    for w, m, s in zip(weights, means, stds):
        prior += w * np.exp(-0.5 * ((x0 - m) / s) ** 2) / (s * np.sqrt(2 * np.pi))
    lik = np.exp(-0.5 * ((x_t - np.sqrt(a) * x0) / sig) ** 2)
    joint = prior * lik
    return float(np.trapezoid(x0 * joint, x0) / np.trapezoid(joint, x0))
