"""Fiber-targeted guidance of a pretrained denoiser.

Each reverse step first optimizes an additive correction u_t: the candidate
state x_hat = x_t + gamma_t u_t is scored by the embedding mismatch of its
one-shot posterior-mean reconstruction against the target representation,
plus a control penalty kappa ||u||^2 and optionally a score-deviation penalty
tau ||s(x_hat) - s(x_t)||^2. After N plain gradient-descent steps on u the
corrected state is denoised one step, and the loop repeats down to t=0.

In "noised-target" mode the target representation is refreshed every step
from a posterior-mean reconstruction of the forward-noised origin, so both
sides of the mismatch live at the same level of detail.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import denoise_step, init_noise, tweedie_estimate
from .numerics.tensor import NonFiniteError, Tensor
from .schedules import NoiseSchedule, forward_noise
from .subjects import FiberTarget, SubjectModel


@dataclass
class GuidanceConfig:
    gamma_kind: str = "interval"  # constant | interval | end_ramp
    gamma_base: float = 1.0
    gamma_boost: float = 8.0
    boost_hi_frac: float = 0.7  # boost window [lo_frac*T, hi_frac*T]
    boost_lo_frac: float = 0.4
    gamma_scale: float = 1.0
    kappa: float = 1e-4
    tau: float = 0.0
    n_inner: int = 6
    lr_start: float = 2e-3
    terminal_mode: str = "static"  # static | noised-target
    shared_target_noise: bool = False
    warm_start: bool = False
    sampler_mode: str = "ode"

    def __post_init__(self):
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if self.lr_start <= 0:
            raise ValueError("lr_start must be positive")
        if self.gamma_base < 0 or self.gamma_boost < 0 or self.gamma_scale < 0:
            raise ValueError("guidance strengths must be non-negative")
        if self.gamma_kind not in ("constant", "interval", "end_ramp"):
            raise ValueError(f"unknown gamma kind '{self.gamma_kind}'")
        if self.terminal_mode not in ("static", "noised-target"):
            raise ValueError(f"unknown terminal mode '{self.terminal_mode}'")

    def gamma(self, t: int, T: int) -> float:
        if self.gamma_kind == "constant":
            g = self.gamma_base
        elif self.gamma_kind == "interval":
            in_window = self.boost_lo_frac * T <= t <= self.boost_hi_frac * T
            g = self.gamma_boost if in_window else self.gamma_base
        else:  # end_ramp
            g = self.gamma_base + (self.gamma_boost - self.gamma_base) * (1.0 - t / T)
        return g * self.gamma_scale

    def inner_lr(self, t: int, T: int) -> float:
        return self.lr_start * t / T

    def scaled(self, factor: float) -> "GuidanceConfig":
        return replace(self, gamma_scale=self.gamma_scale * factor)


def make_default_config() -> GuidanceConfig:
    """Stable defaults: kappa 1e-4, tau 0, N=6 inner steps, inner learning
    rate decaying linearly from 2e-3 to 0, and guidance boosted on the
    70%..40% segment of the schedule."""
    return GuidanceConfig()


@dataclass
class StepRecord:
    t: int
    terminal_loss: float
    u_norm: float
    score_dev: float
    gamma: float
    inner_lr: float
    xhat_hash: str = ""


@dataclass
class TrajectoryLog:
    steps: list = field(default_factory=list)

    def append(self, record: StepRecord):
        if self.steps and record.t >= self.steps[-1].t:
            raise ValueError("steps must be logged with strictly decreasing t")
        self.steps.append(record)

    def to_csv(self, path, config_hash: str = "", seed=None):
        with open(path, "w") as f:
            if config_hash or seed is not None:
                f.write(f"# config_hash={config_hash} seed={seed}\n")
            f.write("t,terminal_loss,u_norm,score_dev,gamma,inner_lr\n")
            for r in self.steps:
                f.write(f"{r.t},{r.terminal_loss!r},{r.u_norm!r},{r.score_dev!r},"
                        f"{r.gamma!r},{r.inner_lr!r}\n")


def _as_batch(arr, n_chains: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.tile(arr, (n_chains, 1))
    return arr


def _target_embedding(x_t_batch, t, target_h, origin, subject, score_model,
                      schedule, mode, rng, shared_noise):
    """Representation the terminal loss pulls toward at this step; constant."""
    if mode == "static":
        return target_h
    if origin is None:
        raise ValueError("noised-target mode requires target.origin")
    if shared_noise is not None:
        xp = (np.sqrt(schedule.alpha_bar[t]) * origin
              + schedule.sigma[t] * shared_noise)
    else:
        xp = forward_noise(origin, t, schedule, rng)
    est = tweedie_estimate(Tensor(xp), t, score_model, schedule)
    return subject.embed(est).data


def terminal_loss(x_t, t: int, target: FiberTarget, subject: SubjectModel,
                  score_model, schedule: NoiseSchedule, mode: str = "static",
                  rng: np.random.Generator | None = None) -> Tensor:
    """Embedding mismatch of the posterior-mean reconstruction, summed over
    the batch; differentiable in x_t."""
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    h_t = _target_embedding(x.data, t, target.h, target.origin, subject,
                            score_model, schedule, mode, rng, None)
    est = tweedie_estimate(x, t, score_model, schedule)
    emb = subject.embed(est)
    return ((emb - Tensor(np.atleast_2d(h_t))) ** 2).sum()


def _inner_objective(u: Tensor, x_t: np.ndarray, gamma: float, t: int, h_t,
                     subject, score_model, schedule, cfg, base_score):
    x_hat = Tensor(x_t) + gamma * u
    est = tweedie_estimate(x_hat, t, score_model, schedule)
    emb = subject.embed(est)
    per_chain = ((emb - Tensor(h_t)) ** 2).sum(axis=1)
    total = per_chain.sum() + cfg.kappa * (u**2).sum()
    if cfg.tau > 0.0:
        dev = score_model.score(x_hat, t) - Tensor(base_score)
        total = total + cfg.tau * (dev**2).sum()
    return total, per_chain.data


def correction_step(x_t: np.ndarray, t: int, target: FiberTarget,
                    subject: SubjectModel, score_model, schedule: NoiseSchedule,
                    cfg: GuidanceConfig, rng: np.random.Generator,
                    u_init: np.ndarray | None = None):
    """Optimize the correction u_t at one step; returns (u_t, diagnostics).

    The returned u is the best iterate seen, so its objective never exceeds
    the value at u = 0. A non-finite inner step stops the optimization and
    flags the diagnostics, keeping the last finite iterate.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    T = schedule.T
    gamma = cfg.gamma(t, T)
    diag = {"gamma": gamma, "inner_lr": cfg.inner_lr(t, T), "nonfinite": False,
            "inner_losses": [], "terminal_per_chain": None, "skipped": False}
    if gamma == 0.0:
        diag["skipped"] = True
        diag["terminal_per_chain"] = np.zeros(x_t.shape[0])
        return np.zeros_like(x_t), diag

    h_t = np.atleast_2d(_target_embedding(
        x_t, t, target.h, target.origin, subject, score_model, schedule,
        cfg.terminal_mode, rng, None))
    base_score = (score_model.score(Tensor(x_t), t).data
                  if cfg.tau > 0.0 else None)

    lr = cfg.inner_lr(t, T)
    u_val = np.zeros_like(x_t) if u_init is None else u_init.copy()
    best_u, best_loss, best_per_chain = u_val, np.inf, None
    for i in range(cfg.n_inner + 1):
        u = Tensor(u_val, requires_grad=True)
        try:
            total, per_chain = _inner_objective(
                u, x_t, gamma, t, h_t, subject, score_model, schedule, cfg,
                base_score)
        except NonFiniteError:
            diag["nonfinite"] = True
            break
        val = total.item()
        diag["inner_losses"].append(val)
        if val < best_loss:
            best_loss, best_u, best_per_chain = val, u_val, per_chain
        if i == cfg.n_inner:
            break
        try:
            total.backward()
        except NonFiniteError:
            diag["nonfinite"] = True
            break
        u_val = u_val - lr * u.grad
        if not np.all(np.isfinite(u_val)):
            diag["nonfinite"] = True
            break
    if best_per_chain is None:  # even u=0 failed; fall back to no correction
        best_u, best_per_chain = np.zeros_like(x_t), np.full(x_t.shape[0], np.nan)
    diag["terminal_per_chain"] = best_per_chain
    diag["objective_at_zero"] = diag["inner_losses"][0] if diag["inner_losses"] else np.nan
    diag["objective_final"] = best_loss
    return best_u, diag


def _score_deviation(x_hat, x_t, t, score_model) -> float:
    s1 = score_model.score(Tensor(x_hat), t).data
    s0 = score_model.score(Tensor(x_t), t).data
    return float(np.mean(np.sqrt(((s1 - s0) ** 2).sum(axis=-1))))


def guided_sample(target: FiberTarget, subject: SubjectModel, score_model,
                  schedule: NoiseSchedule, cfg: GuidanceConfig,
                  rng: np.random.Generator, n_chains: int = 1,
                  compute_score_dev: bool = True):
    """Run the guided reverse trajectory; returns (samples, TrajectoryLog).

    Multiple chains for the same target run as one batch (the correction
    objective is separable across chains). Logged scalars are means over
    the batch.
    """
    dim = target.origin.size if target.origin is not None else None
    if dim is None:
        dim = getattr(score_model, "data_dim", None)
        if dim is None:
            raise ValueError("cannot infer data dim; provide target.origin "
                             "or a score model with data_dim")
    h = np.atleast_2d(target.h)
    h = np.repeat(h, n_chains, axis=0) if h.shape[0] == 1 else h
    origin = None if target.origin is None else _as_batch(target.origin, n_chains)
    batch_target = FiberTarget(h=h, origin=origin, subject_id=target.subject_id)

    x = np.atleast_2d(init_noise((n_chains, dim), schedule, rng))
    log = TrajectoryLog()
    shared_noise = None
    if cfg.terminal_mode == "noised-target" and cfg.shared_target_noise:
        shared_noise = rng.standard_normal(x.shape)
    u_prev = None
    for t in range(schedule.T, 0, -1):
        gamma = cfg.gamma(t, schedule.T)
        u, diag = _correction_with_shared_noise(
            x, t, batch_target, subject, score_model, schedule, cfg, rng,
            shared_noise, u_prev if cfg.warm_start else None)
        x_hat = x + gamma * u
        score_dev = (_score_deviation(x_hat, x, t, score_model)
                     if compute_score_dev and gamma > 0.0 else 0.0)
        term = (float(np.mean(diag["terminal_per_chain"]))
                if diag["terminal_per_chain"] is not None else np.nan)
        log.append(StepRecord(
            t=t,
            terminal_loss=term,
            u_norm=float(np.mean(np.sqrt((u**2).sum(axis=-1)))),
            score_dev=score_dev,
            gamma=gamma,
            inner_lr=diag["inner_lr"],
            xhat_hash=hashlib.sha256(np.ascontiguousarray(x_hat).tobytes()).hexdigest()[:12],
        ))
        x = denoise_step(x_hat, t, score_model, schedule,
                         mode=cfg.sampler_mode, rng=rng)
        u_prev = u
    return x, log


def _correction_with_shared_noise(x, t, target, subject, score_model, schedule,
                                  cfg, rng, shared_noise, u_init):
    if shared_noise is None:
        return correction_step(x, t, target, subject, score_model, schedule,
                               cfg, rng, u_init=u_init)
    # Re-enter correction_step with a one-shot rng substitute that replays the
    # shared terminal noise at this step.
    frozen = _FrozenNoise(shared_noise)
    return correction_step(x, t, target, subject, score_model, schedule, cfg,
                           frozen, u_init=u_init)


class _FrozenNoise:
    """Minimal Generator stand-in returning a fixed normal draw."""

    def __init__(self, noise: np.ndarray):
        self._noise = noise

    def standard_normal(self, shape):
        if tuple(shape) != self._noise.shape:
            raise ValueError("frozen noise shape mismatch")
        return self._noise
