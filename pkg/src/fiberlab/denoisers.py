"""Trainable denoisers: an unconditional noise predictor for the diffusion
prior and a conditional velocity model used as the trained fiber generator.

The conditional model is a flow-matching network v(x_u, u, h) on the straight
path x_u = (1-u) x0 + u z (u=0 clean, u=1 noise); sampling integrates the
velocity from u=1 to 0 with Euler steps, and that simulation stays inside the
autodiff graph so sample-based losses can be trained through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics.adam import AdamState, adam_step
from .numerics.nn import Layer, Mlp, init_mlp, mlp_apply
from .numerics.tensor import NonFiniteError, Tensor, concat
from .schedules import NoiseSchedule
from . import diffusion as _diffusion

N_TIME_FREQS = 8


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, trace: list):
        super().__init__(message)
        self.trace = trace


def time_embedding(u) -> np.ndarray:
    """Sinusoidal features of normalized time u in [0, 1]; shape (n, 16)."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))[:, None]
    freqs = 2.0 ** np.arange(N_TIME_FREQS)
    ang = 2.0 * np.pi * freqs * u
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def epsilon_to_score(eps, t: int, schedule: NoiseSchedule):
    return eps * (-1.0 / schedule.sigma[t])


def score_to_epsilon(score, t: int, schedule: NoiseSchedule):
    return score * (-schedule.sigma[t])


@dataclass
class LearnedDenoiser:
    net: Mlp
    schedule: NoiseSchedule
    parameterization: str = "epsilon"  # or "score"

    def __post_init__(self):
        if self.parameterization not in ("epsilon", "score"):
            raise ValueError("parameterization must be 'epsilon' or 'score'")

    @property
    def data_dim(self) -> int:
        return self.net.output_dim

    def _forward(self, x: Tensor, t) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        tarr = np.full(x.shape[0], t, dtype=np.float64) if np.isscalar(t) else np.asarray(t)
        emb = time_embedding(tarr / self.schedule.T)
        out = mlp_apply(self.net, concat([x, Tensor(emb)], axis=1))
        return out.reshape(-1) if squeeze else out

    def epsilon(self, x, t) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        out = self._forward(x, t)
        if self.parameterization == "score":
            sig = self.schedule.sigma[np.asarray(t)] if not np.isscalar(t) else self.schedule.sigma[t]
            if not np.isscalar(t):
                sig = Tensor(np.asarray(sig)[:, None])
            out = out * (-1.0) * sig
        return out

    def score(self, x, t: int) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        out = self._forward(x, t)
        if self.parameterization == "epsilon":
            out = epsilon_to_score(out, t, self.schedule)
        return out


@dataclass
class ConditionalDenoiser:
    net: Mlp
    data_dim: int
    cond_dim: int

    def velocity(self, x, u, h) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = h if isinstance(h, Tensor) else Tensor(h)
        uarr = np.full(x.shape[0], u, dtype=np.float64) if np.isscalar(u) else np.asarray(u)
        emb = time_embedding(uarr)
        return mlp_apply(self.net, concat([x, Tensor(emb), h], axis=1))


def _rebuild(net: Mlp, new_params) -> Mlp:
    layers = []
    it = iter(new_params)
    for layer in net.layers:
        layers.append(Layer(next(it), next(it), layer.activation))
    return Mlp(layers)


def _sgd_adam_update(net: Mlp, loss: Tensor, state: AdamState) -> Mlp:
    params = list(net.params())
    loss.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    new_params, _ = adam_step(params, grads, state)
    return _rebuild(net, new_params)


def train_prior(dataset: np.ndarray, hidden, schedule: NoiseSchedule, steps: int,
                rng: np.random.Generator, batch_size: int = 64, lr: float = 1e-3,
                lr_final_frac: float = 0.05, trace_every: int = 25) -> tuple:
    """Fit a noise-prediction denoiser with denoising score matching.

    The learning rate decays linearly to lr * lr_final_frac. Returns
    (LearnedDenoiser, trace) where trace rows are (step, loss). Aborts with
    TrainingDiverged if the loss explodes.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2 or len(dataset) == 0:
        raise ValueError("dataset must be non-empty with shape (n, dim)")
    dim = dataset.shape[1]
    net = init_mlp([dim + 2 * N_TIME_FREQS, *hidden, dim], rng)
    den = LearnedDenoiser(net, schedule)
    state = AdamState(lr=lr)
    trace = []
    for step in range(1, steps + 1):
        state.lr = lr * (1.0 - (1.0 - lr_final_frac) * (step - 1) / max(steps - 1, 1))
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        loss = _diffusion.dsm_loss(den, dataset[idx], rng)
        val = loss.item()
        if not np.isfinite(val) or val > 1e6:
            raise TrainingDiverged(f"loss {val} at step {step}", trace)
        if step % trace_every == 0 or step == 1 or step == steps:
            trace.append((step, val))
        den.net = _sgd_adam_update(den.net, loss, state)
    return den, trace


def make_conditional(data_dim: int, cond_dim: int, hidden,
                     rng: np.random.Generator) -> ConditionalDenoiser:
    net = init_mlp([data_dim + 2 * N_TIME_FREQS + cond_dim, *hidden, data_dim], rng)
    return ConditionalDenoiser(net, data_dim, cond_dim)


def simulate_flow(model: ConditionalDenoiser, z, h, n_steps: int) -> Tensor:
    """Euler integration of the velocity field from noise (u=1) to data (u=0).

    Stays differentiable w.r.t. the model parameters (and z, h if they are
    grad-requiring tensors).
    """
    x = z if isinstance(z, Tensor) else Tensor(z)
    h = h if isinstance(h, Tensor) else Tensor(h)
    du = 1.0 / n_steps
    for k in range(n_steps, 0, -1):
        x = x - du * model.velocity(x, k * du, h)
    return x


def sample_conditional(model: ConditionalDenoiser, h: np.ndarray,
                       rng: np.random.Generator, n_steps: int = 32) -> np.ndarray:
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    z = rng.standard_normal((h.shape[0], model.data_dim))
    return simulate_flow(model, Tensor(z), Tensor(h), n_steps).data


def conditional_fm_loss(model: ConditionalDenoiser, x0: np.ndarray, h: np.ndarray,
                        rng: np.random.Generator, fiber_weight: float = 0.0,
                        sim_steps: int = 8, subject=None):
    """Flow-matching MSE plus, when fiber_weight > 0, the mean embedding
    mismatch of samples simulated through the solver.

    Returns (total loss Tensor, fm component float, fiber component float).
    Draw order is fixed (u, z for matching, then z for simulation) so the
    fiber_weight=0 loss is bit-identical to plain flow matching on one seed.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    u = rng.uniform(0.0, 1.0, size=n)
    z = rng.standard_normal(x0.shape)
    x_u = (1.0 - u[:, None]) * x0 + u[:, None] * z
    v_target = z - x0
    pred = model.velocity(Tensor(x_u), u, Tensor(h))
    fm = ((pred - Tensor(v_target)) ** 2).mean()
    if fiber_weight <= 0.0:
        return fm, fm.item(), 0.0
    z2 = rng.standard_normal(x0.shape)
    x_sim = simulate_flow(model, Tensor(z2), Tensor(h), sim_steps)
    emb = subject.embed(x_sim)
    fiber = ((emb - Tensor(h)) ** 2).sum(axis=1).mean()
    total = fm + fiber_weight * fiber
    return total, fm.item(), fiber.item()


def train_conditional(dataset: np.ndarray, embeddings: np.ndarray, subject, hidden,
                      steps: int, rng: np.random.Generator, fiber_weight: float = 0.0,
                      sim_steps: int = 8, batch_size: int = 32, lr: float = 1e-3,
                      trace_every: int = 25) -> tuple:
    """Train the conditional fiber generator; returns (model, trace, n_skipped).

    Batches whose simulated fiber term goes non-finite are skipped and counted;
    more than 10% skipped aborts the run.
    """
    if fiber_weight < 0:
        raise ValueError("fiber_weight must be >= 0")
    if sim_steps < 1:
        raise ValueError("sim_steps must be >= 1")
    dataset = np.asarray(dataset, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if len(dataset) == 0 or len(dataset) != len(embeddings):
        raise ValueError("dataset and embeddings must be non-empty and aligned")
    model = make_conditional(dataset.shape[1], embeddings.shape[1], hidden, rng)
    state = AdamState(lr=lr)
    trace, skipped = [], 0
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(dataset), size=min(batch_size, len(dataset)))
        try:
            total, fm_val, fiber_val = conditional_fm_loss(
                model, dataset[idx], embeddings[idx], rng,
                fiber_weight=fiber_weight, sim_steps=sim_steps, subject=subject)
        except NonFiniteError:
            skipped += 1
            if step >= 20 and skipped > 0.10 * step:
                raise TrainingDiverged(
                    f"{skipped}/{step} batches skipped for non-finite fiber loss", trace)
            continue
        val = total.item()
        if val > 1e6:
            raise TrainingDiverged(f"loss {val} at step {step}", trace)
        if step % trace_every == 0 or step == 1 or step == steps:
            trace.append((step, val, fm_val, fiber_val))
        model.net = _sgd_adam_update(model.net, total, state)
    return model, trace, skipped
