"""Group-relative policy optimization over stochastic denoising trajectories.

A group of SDE rollouts shares one prompt; rewards are normalized into
advantages inside the group, and one clipped-ratio gradient-ascent step is
taken against the per-step Gaussian transition densities. The update is a
plain ascent step (no moments, no decay) so a zero-advantage group leaves
parameters bit-identical.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .diffusion import (
    DenoiseTrajectory,
    Schedule,
    linear_schedule,
    sample_sde,
    transition_logprob,
)
from .errors import DegenerateDensityError, DomainError
from .rewards import Scorer, grad_norm
from .seeding import derive_seed
from .tensor import Tensor

# ratios are exp(log-prob differences); cap the exponent so a wild early
# update cannot overflow float32
_MAX_LOG_RATIO = 30.0


@dataclass
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    lr: float = 1e-2
    noise_level: float = 0.7
    steps: int = 8
    inner_epochs: int = 1
    kl_coeff: float = 0.0  # knob; off by default

    def validate(self) -> "GrpoConfig":
        if self.group_size < 2:
            raise DomainError("grpo.group_size must be >= 2")
        if self.clip_eps <= 0:
            raise DomainError("grpo.clip_eps must be > 0")
        if self.steps < 1:
            raise DomainError("grpo.steps must be >= 1")
        return self


@dataclass
class RolloutGroup:
    prompt_id: int
    trajectories: list[DenoiseTrajectory]
    rewards: list[float]

    @property
    def group_size(self) -> int:
        return len(self.trajectories)


@dataclass
class StepReport:
    objective: float
    grad_norm: float
    ratio_mean: float
    clip_fraction: float
    reward_mean: float
    updated: bool


def rollout_group(
    model,
    condition: Tensor,
    prompt_id: int,
    scorer: Scorer,
    cfg: GrpoConfig,
    seed: int,
    sample_dim: int,
    schedule: Optional[Schedule] = None,
) -> RolloutGroup:
    """Sample G independent trajectories and score their terminal states."""
    cfg.validate()
    schedule = schedule or linear_schedule()
    # one shared prior draw per group: members differ only through the
    # per-step exploration noise, so noise_level 0 collapses the group
    init = np.random.default_rng(derive_seed(seed, "prior")).standard_normal(
        sample_dim
    ).astype(np.float32)
    trajectories = []
    rewards = []
    for g in range(cfg.group_size):
        traj = sample_sde(
            model,
            condition,
            cfg.steps,
            cfg.noise_level,
            derive_seed(seed, "rollout", g),
            sample_dim,
            schedule,
            init=init,
        )
        trajectories.append(traj)
        rewards.append(float(scorer(traj.terminal, prompt_id)))
    return RolloutGroup(prompt_id=prompt_id, trajectories=trajectories, rewards=rewards)


def advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-normalized advantages: (r - mean) / (population std + 1e-8)."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise DomainError("advantages need a group of at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + 1e-8)


def make_step_mean_fn(
    model, condition: Tensor, cfg: GrpoConfig, schedule: Optional[Schedule] = None
) -> Callable[[np.ndarray, float], Tensor]:
    """Graph-building twin of the sampler's step mean, for density gradients.

    Mirrors the sampler's arithmetic order exactly so that, with unchanged
    parameters, the recomputed mean equals the recorded one.
    """
    schedule = schedule or linear_schedule()
    dt = 1.0 / cfg.steps

    def step_mean(x: np.ndarray, t: float) -> Tensor:
        v = model(x, condition, t)
        v = v if isinstance(v, Tensor) else Tensor(v)
        sde_sigma = cfg.noise_level * schedule.sigma(t)
        xc = Tensor(np.asarray(x, dtype=np.float32))
        if sde_sigma == 0.0:
            drift = v
        else:
            coeff = sde_sigma * sde_sigma / (2.0 * t)
            drift = T.add(v, T.scale(T.add(xc, T.scale(v, 1.0 - t)), coeff))
        return T.sub(xc, T.scale(drift, dt))

    return step_mean


def gaussian_logprob_graph(mean: Tensor, std: float, value: np.ndarray) -> Tensor:
    """Differentiable diagonal-Gaussian log density with constant std."""
    if std <= 0.0:
        raise DegenerateDensityError("gaussian_logprob_graph needs std > 0")
    diff = T.sub(Tensor(np.asarray(value, dtype=np.float32)), mean)
    z = T.scale(diff, 1.0 / std)
    quad = T.scale(T.mul(z, z).sum(), -0.5)
    d = np.asarray(value).size
    const = -d * math.log(std) - 0.5 * d * math.log(2.0 * math.pi)
    return T.add(quad, Tensor(np.float32(const)))


def policy_update(
    step_mean_fn: Callable[[np.ndarray, float], Tensor],
    params: Sequence[Tensor],
    group: RolloutGroup,
    cfg: GrpoConfig,
) -> StepReport:
    """One clipped-ratio ascent step on the group's surrogate objective."""
    cfg.validate()
    adv = advantages(group.rewards)
    reward_mean = float(np.mean(group.rewards))
    if np.all(adv == 0.0):
        # the surrogate is identically zero: provably a no-op update
        return StepReport(
            objective=0.0, grad_norm=0.0, ratio_mean=1.0,
            clip_fraction=0.0, reward_mean=reward_mean, updated=False,
        )
    terms: list[Tensor] = []
    ratio_values: list[float] = []
    clipped_count = 0
    lo, hi = 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps
    for advantage, traj in zip(adv, group.trajectories):
        for k, tr in enumerate(traj.transitions):
            if tr.std == 0.0:
                raise DegenerateDensityError(
                    "trajectory has a zero-stddev transition; rollout with noise_level > 0"
                )
            new_mean = step_mean_fn(traj.states[k], tr.t)
            logp_new = gaussian_logprob_graph(new_mean, tr.std, traj.states[k + 1])
            logp_old = transition_logprob(tr, traj.states[k + 1])
            ratio = T.exp(T.clip(T.add(logp_new, Tensor(np.float32(-logp_old))),
                                 -_MAX_LOG_RATIO, _MAX_LOG_RATIO))
            ratio_values.append(float(ratio.item()))
            if not lo <= ratio_values[-1] <= hi:
                clipped_count += 1
            unclipped = T.scale(ratio, float(advantage))
            clipped = T.scale(T.clip(ratio, lo, hi), float(advantage))
            terms.append(T.minimum(unclipped, clipped))
    total = terms[0]
    for term in terms[1:]:
        total = T.add(total, term)
    objective = T.scale(total, 1.0 / len(terms))
    T.backward(T.neg(objective))
    norm = grad_norm(params)
    for p in params:
        if p.grad is not None:
            p.data = p.data - np.float32(cfg.lr) * p.grad
            p.grad = None
    return StepReport(
        objective=float(objective.item()),
        grad_norm=norm,
        ratio_mean=float(np.mean(ratio_values)),
        clip_fraction=clipped_count / len(ratio_values),
        reward_mean=reward_mean,
        updated=True,
    )
