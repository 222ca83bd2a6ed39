"""Flow-matching generator: corruption, velocity loss, ODE and SDE sampling.

Conventions: t=0 is data and t=1 is noise; the default schedule is the
rectified-flow line alpha(t)=1-t, sigma(t)=t, whose velocity target is
eps - x0. The stochastic sampler injects noise with scale
noise_level * sigma(t) and compensates the drift so the marginals of the
deterministic flow are preserved; at noise_level 0 it steps through exactly
the same arithmetic as the Euler ODE sampler. Drift terms are evaluated at
the pre-step time, which is at least 1/steps, so the 1/t factor never
divides by zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    DegenerateDensityError,
    DomainError,
    EmptinessError,
    ShapeError,
)
from .nn import ConditionedBlock, LayerNorm, Linear, Module, sinusoidal_features
from .seeding import spawn_rng
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Schedule:
    """Corruption schedule: alpha decreasing with alpha(0)=1, sigma increasing with sigma(0)=0."""

    alpha: Callable[[float], float]
    sigma: Callable[[float], float]


def linear_schedule() -> Schedule:
    return Schedule(alpha=lambda t: 1.0 - t, sigma=lambda t: t)


def validate_schedule(schedule: Schedule, grid_step: float = 1e-3) -> None:
    """Check boundary values and monotonicity on a dense grid."""
    if schedule.alpha(0.0) != 1.0 or schedule.alpha(1.0) != 0.0:
        raise DomainError("alpha must satisfy alpha(0)=1 and alpha(1)=0")
    if schedule.sigma(0.0) != 0.0 or schedule.sigma(1.0) != 1.0:
        raise DomainError("sigma must satisfy sigma(0)=0 and sigma(1)=1")
    ts = np.arange(0.0, 1.0 + grid_step / 2, grid_step)
    alphas = np.array([schedule.alpha(float(t)) for t in ts])
    sigmas = np.array([schedule.sigma(float(t)) for t in ts])
    if np.any(np.diff(alphas) > 0):
        raise DomainError("alpha must be monotonically decreasing")
    if np.any(np.diff(sigmas) < 0):
        raise DomainError("sigma must be monotonically increasing")


@dataclass
class DenoiserConfig:
    sample_dim: int = 64
    tokens: int = 8
    width: int = 64
    heads: int = 4
    cond_width: int = 64
    blocks: int = 2

    def validate(self) -> "DenoiserConfig":
        if self.sample_dim % self.tokens != 0:
            raise DomainError(
                f"sample_dim {self.sample_dim} not divisible by tokens {self.tokens}"
            )
        if self.width % self.heads != 0:
            raise DomainError(f"width {self.width} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise DomainError("denoiser needs at least one block")
        return self

    @property
    def row_dim(self) -> int:
        return self.sample_dim // self.tokens


class Denoiser(Module):
    """Cross-attention velocity model over tokenized flat samples."""

    def __init__(self, config: DenoiserConfig, seed: int):
        config.validate()
        rng = spawn_rng("denoiser", seed)
        d = config.width
        self.embed = Linear(config.row_dim, d, rng)
        self.time_fc1 = Linear(d, d, rng)
        self.time_fc2 = Linear(d, d, rng)
        self.blocks = [
            ConditionedBlock(d, config.cond_width, config.heads, rng)
            for _ in range(config.blocks)
        ]
        self.out_ln = LayerNorm(d)
        self.head = Linear(d, config.row_dim, rng)
        self.config = config

    def __call__(self, x, condition: Tensor, t: float) -> Tensor:
        cfg = self.config
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if xt.shape != (cfg.sample_dim,):
            raise ShapeError(f"sample shape {xt.shape} != ({cfg.sample_dim},)")
        tokens = self.embed(T.reshape(xt, (cfg.tokens, cfg.row_dim)))
        sinus = Tensor(sinusoidal_features(float(t), cfg.width).reshape(1, -1))
        temb = self.time_fc2(T.gelu(self.time_fc1(sinus)))
        tokens = T.add(tokens, temb)
        for block in self.blocks:
            tokens = block(tokens, condition)
        rows = self.head(self.out_ln(tokens))
        return T.reshape(rows, (cfg.sample_dim,))


# -- corruption and loss ----------------------------------------------------

def forward_corrupt(
    schedule: Schedule, x0: np.ndarray, t: float, eps: np.ndarray
) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"corruption time {t} outside [0, 1]")
    x0 = np.asarray(x0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    return np.float32(schedule.alpha(t)) * x0 + np.float32(schedule.sigma(t)) * eps


def fm_loss(
    model: Callable[[np.ndarray, Tensor, float], Tensor],
    x0_batch: np.ndarray,
    condition: Tensor,
    rng: np.random.Generator,
    schedule: Optional[Schedule] = None,
) -> Tensor:
    """Mean squared velocity error over a batch, t ~ U(0,1), eps ~ N(0,I)."""
    schedule = schedule or linear_schedule()
    batch = np.asarray(x0_batch, dtype=np.float32)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[0] == 0:
        raise EmptinessError("fm_loss needs a nonempty batch")
    acc = None
    for x0 in batch:
        t = float(rng.uniform())
        eps = rng.standard_normal(x0.shape[0]).astype(np.float32)
        x_t = forward_corrupt(schedule, x0, t, eps)
        target = Tensor(eps - x0)
        pred = model(x_t, condition, t)
        pred = pred if isinstance(pred, Tensor) else Tensor(pred)
        diff = T.sub(pred, target)
        item = T.mean(T.mul(diff, diff))
        acc = item if acc is None else T.add(acc, item)
    return T.scale(acc, 1.0 / batch.shape[0])


# -- sampling ---------------------------------------------------------------

@dataclass
class Transition:
    """One Gaussian step: N(mean, std^2 I) evaluated at the pre-step time."""

    t: float
    mean: np.ndarray
    std: float


@dataclass
class DenoiseTrajectory:
    states: list[np.ndarray] = field(default_factory=list)
    transitions: list[Transition] = field(default_factory=list)
    seed: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.states)


def _initial_noise(seed: int, dim: int) -> tuple[np.random.Generator, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng, rng.standard_normal(dim).astype(np.float32)


def ode_trajectory(
    model, condition: Tensor, steps: int, seed: int, sample_dim: int,
    schedule: Optional[Schedule] = None,
) -> list[np.ndarray]:
    """Euler states of dx = v dt from t=1 (seeded noise) down to t=0."""
    if steps < 1:
        raise DomainError("sampling needs steps >= 1")
    schedule = schedule or linear_schedule()
    _, x = _initial_noise(seed, sample_dim)
    states = [x.copy()]
    dt = np.float32(1.0 / steps)
    for k in range(steps):
        t = 1.0 - k / steps
        with T.no_grad():
            v = model(x, condition, t)
        v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)
        x = x - dt * v
        states.append(x.copy())
    return states


def sample_ode(
    model, condition: Tensor, steps: int, seed: int, sample_dim: int,
    schedule: Optional[Schedule] = None,
) -> np.ndarray:
    return ode_trajectory(model, condition, steps, seed, sample_dim, schedule)[-1]


def sde_step_mean(
    x: np.ndarray, v: np.ndarray, t: float, dt: float, sde_sigma: float
) -> np.ndarray:
    """Deterministic part of one Euler-Maruyama step toward t - dt."""
    dt = np.float32(dt)
    if sde_sigma == 0.0:
        drift = v
    else:
        coeff = np.float32(sde_sigma * sde_sigma / (2.0 * t))
        drift = v + coeff * (x + np.float32(1.0 - t) * v)
    return x - dt * drift


def sample_sde(
    model, condition: Tensor, steps: int, noise_level: float, seed: int,
    sample_dim: int, schedule: Optional[Schedule] = None,
    init: Optional[np.ndarray] = None,
) -> DenoiseTrajectory:
    """Euler-Maruyama sampler with injected noise scale noise_level * sigma(t).

    Records every step's Gaussian transition (mean, std) so densities can be
    evaluated later; with noise_level zero the states match sample_ode
    bit for bit on the same grid and seed. `init` overrides the seeded
    initial noise (rollout groups share one prior draw across members).
    """
    if steps < 1:
        raise DomainError("sampling needs steps >= 1")
    if noise_level < 0:
        raise DomainError("noise_level must be >= 0")
    schedule = schedule or linear_schedule()
    if init is not None:
        rng = np.random.default_rng(seed)
        x = np.asarray(init, dtype=np.float32).copy()
        if x.shape != (sample_dim,):
            raise ShapeError(f"init shape {x.shape} != ({sample_dim},)")
    else:
        rng, x = _initial_noise(seed, sample_dim)
    traj = DenoiseTrajectory(states=[x.copy()], seed=seed)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k / steps
        with T.no_grad():
            v = model(x, condition, t)
        v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float32)
        sde_sigma = noise_level * schedule.sigma(t)
        mean = sde_step_mean(x, v, t, dt, sde_sigma)
        std = float(sde_sigma * math.sqrt(dt))
        if std > 0.0:
            x = mean + np.float32(std) * rng.standard_normal(sample_dim).astype(np.float32)
        else:
            x = mean
        traj.transitions.append(Transition(t=t, mean=mean, std=std))
        traj.states.append(x.copy())
    return traj


def transition_logprob(transition: Transition, candidate: np.ndarray) -> float:
    """Log-density of a diagonal Gaussian transition at the candidate state."""
    if transition.std == 0.0:
        raise DegenerateDensityError(
            "transition has zero stddev; sample with noise_level > 0 for densities"
        )
    candidate = np.asarray(candidate, dtype=np.float64)
    mean = np.asarray(transition.mean, dtype=np.float64)
    if candidate.shape != mean.shape:
        raise ShapeError(f"candidate shape {candidate.shape} != mean shape {mean.shape}")
    d = mean.size
    z2 = float(np.sum(((candidate - mean) / transition.std) ** 2))
    return -0.5 * z2 - d * math.log(transition.std) - 0.5 * d * LOG_2PI
