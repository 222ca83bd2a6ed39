"""Layer-wise dynamic adjustment: reward/grad-norm guided layer perturbation.

The controller watches one scalar reward and one gradient-norm value per
epoch. A gradient-norm spike latches a flag; a non-improving reward extends
a stagnation streak. When both conditions hold outside the cooling-off
window, the controller installs fresh multiplicative Gaussian masks
(1 + gamma * eps) on the layer band assigned to the active reward, resets
its counters, and starts a cooldown equal to the current epoch index, so
the quiet period grows as training progresses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DomainError, EmptinessError
from .lim import LayerMaskSet
from .rewards import RewardKind
from .seeding import spawn_rng


@dataclass(frozen=True)
class Perturb:
    layers: tuple[int, ...]
    gamma: float


@dataclass
class LdamConfig:
    layer_count: int
    mask_shape: tuple[int, int]
    spike_factor: float = 1e2
    stagnation_threshold: int = 5
    gamma_base: float = 0.1
    resample_each_use: bool = False  # draw fresh mask noise on every read
    bands: Optional[dict[RewardKind, tuple[int, int]]] = None

    def validate(self) -> "LdamConfig":
        if self.spike_factor <= 1:
            raise DomainError("ldam.spike_factor must be > 1")
        if self.stagnation_threshold < 1:
            raise DomainError("ldam.stagnation_threshold must be >= 1")
        if self.layer_count < 1:
            raise DomainError("ldam.layer_count must be >= 1")
        return self


@dataclass
class LdamState:
    grad_prev: float = math.inf
    reward_prev: float = 0.0
    cooldown: int = 0
    stagnation: int = 0
    spike: bool = False
    epoch: int = 0
    event_count: int = 0
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    last_gamma: float = 0.0
    last_layers: tuple[int, ...] = ()


# reference band on a 28-layer stack: deep layers steer alignment, the
# middle band steers quality and preference
_ALIGNMENT_BAND = (24, 28)
_MIDDLE_BAND = (12, 23)
_REFERENCE_LAYERS = 28


def select_layers(kind: RewardKind, layer_count: int) -> list[int]:
    """Reward-specific layer band, rescaled proportionally from the 28-layer reference."""
    if layer_count < 1:
        raise DomainError("layer_count must be >= 1")
    lo_ref, hi_ref = _ALIGNMENT_BAND if kind == RewardKind.ALIGNMENT else _MIDDLE_BAND
    lo = math.ceil(lo_ref * layer_count / _REFERENCE_LAYERS)
    if kind == RewardKind.ALIGNMENT:
        hi = layer_count
    else:
        hi = math.floor(hi_ref * layer_count / _REFERENCE_LAYERS)
    band = list(range(max(lo, 1), hi + 1))
    if not band:
        raise EmptinessError(
            f"layer band for {kind.value} is empty at layer_count {layer_count}"
        )
    return band


def gamma_schedule(grad_now: float, grad_prev: float, stagnation: int, cfg: LdamConfig) -> float:
    """Perturbation scale from the grad-norm jump and the stagnation streak.

    gamma = gamma_base * min(1, log10(g_n / g_prev) / 2 * (streak / threshold)),
    clamped to [0, gamma_base]; an infinite g_prev (first epoch) yields
    gamma_base outright.
    """
    if grad_now < 0 or grad_prev < 0 or stagnation < 0:
        raise DomainError("gamma_schedule inputs must be nonnegative")
    if math.isinf(grad_prev):
        return cfg.gamma_base
    if grad_now <= 0 or grad_prev == 0:
        return 0.0
    jump = math.log10(grad_now / grad_prev) / 2.0
    raw = min(1.0, jump * (stagnation / cfg.stagnation_threshold))
    return max(0.0, min(cfg.gamma_base, cfg.gamma_base * raw))


class LdamController:
    """Sequential, single-threaded controller: one observe() per epoch."""

    def __init__(self, cfg: LdamConfig, seed: int, state: Optional[LdamState] = None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.state = state if state is not None else LdamState()
        self.events: list[dict] = []
        self._draws = 0

    def observe(self, grad_norm_value: float, reward_value: float, kind: RewardKind) -> Optional[Perturb]:
        """Feed one epoch's grad norm and reward; maybe emit a perturbation."""
        st = self.state
        st.epoch += 1
        decision: Optional[Perturb] = None
        if grad_norm_value >= st.grad_prev * self.cfg.spike_factor:
            st.spike = True
        if reward_value <= st.reward_prev:
            st.stagnation += 1
        if st.cooldown == 0:
            if st.spike and st.stagnation >= self.cfg.stagnation_threshold:
                gamma = gamma_schedule(grad_norm_value, st.grad_prev, st.stagnation, self.cfg)
                layers = tuple(select_layers(kind, self.cfg.layer_count))
                for layer in layers:
                    st.masks[layer] = self._draw_mask(st.event_count, layer, gamma)
                st.last_gamma = gamma
                st.last_layers = layers
                st.event_count += 1
                st.stagnation = 0
                st.spike = False
                st.cooldown = st.epoch
                decision = Perturb(layers=layers, gamma=gamma)
        else:
            st.cooldown -= 1
        st.grad_prev = grad_norm_value
        st.reward_prev = reward_value
        self.events.append(
            {
                "epoch": st.epoch,
                "grad_norm": grad_norm_value,
                "reward": reward_value,
                "stagnation": st.stagnation,
                "spike": st.spike,
                "cooldown": st.cooldown,
                "decision": "perturb" if decision else "none",
                "gamma": decision.gamma if decision else 0.0,
            }
        )
        return decision

    def _draw_mask(self, event_index: int, layer: int, gamma: float) -> np.ndarray:
        rng = spawn_rng("ldam-mask", self.seed, event_index, layer)
        eps = rng.standard_normal(self.cfg.mask_shape).astype(np.float32)
        return (1.0 + np.float32(gamma) * eps).astype(np.float32)

    def apply_masks(self) -> LayerMaskSet:
        """Masks for the integrator: identity before any event, else the
        masks installed by the latest event (persisted until replaced)."""
        st = self.state
        if not st.masks:
            return LayerMaskSet.identity()
        if self.cfg.resample_each_use and st.last_layers:
            self._draws += 1
            fresh = dict(st.masks)
            for layer in st.last_layers:
                rng = spawn_rng("ldam-resample", self.seed, self._draws, layer)
                eps = rng.standard_normal(self.cfg.mask_shape).astype(np.float32)
                fresh[layer] = (1.0 + np.float32(st.last_gamma) * eps).astype(np.float32)
            return LayerMaskSet(fresh)
        return LayerMaskSet(dict(st.masks))

    def event_log_lines(self) -> list[str]:
        header = "epoch,grad_norm,reward,stagnation,spike,cooldown,decision,gamma"
        rows = [
            f"{e['epoch']},{e['grad_norm']:.6g},{e['reward']:.6g},{e['stagnation']},"
            f"{int(e['spike'])},{e['cooldown']},{e['decision']},{e['gamma']:.6g}"
            for e in self.events
        ]
        return [header] + rows
