"""Deterministic toy reward models plus the gradient-norm monitor.

Three analytic scorers stand in for learned reward networks: alignment
(cosine against a prompt-indexed target direction), quality (closeness of
the sample's RMS norm to 1) and preference (a convex mix of the two). All
are pure functions, so RL runs are reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .errors import DomainError, GradientsAbsentError
from .seeding import spawn_rng
from .tensor import Tensor

Scorer = Callable[[np.ndarray, int], float]

_TARGET_TAG = "reward-target-v1"


class RewardKind(str, Enum):
    ALIGNMENT = "alignment"
    QUALITY = "quality"
    PREFERENCE = "preference"


@dataclass
class RewardReport:
    kind: RewardKind
    value: float
    prompt_id: int
    sample_id: int


def prompt_target(prompt_id: int, dim: int) -> np.ndarray:
    """Fixed seeded unit vector for a prompt id; distinct prompts get distinct optima."""
    rng = spawn_rng(_TARGET_TAG, int(prompt_id), int(dim))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def alignment_reward(sample: np.ndarray, prompt_id: int) -> float:
    """Cosine similarity between the flattened sample and the prompt target."""
    flat = np.asarray(sample, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(flat))
    if norm == 0.0:
        return 0.0
    target = prompt_target(prompt_id, flat.size)
    return float(np.dot(flat, target) / norm)


def quality_reward(sample: np.ndarray, prompt_id: int = 0) -> float:
    """exp(-|rms - 1|): highest for samples with unit RMS norm."""
    flat = np.asarray(sample, dtype=np.float64).ravel()
    rms = float(np.linalg.norm(flat)) / math.sqrt(flat.size)
    return math.exp(-abs(rms - 1.0))


def preference_reward(sample: np.ndarray, prompt_id: int, weight: float = 0.5) -> float:
    """Convex mix of alignment and quality, default 50/50."""
    if not 0.0 <= weight <= 1.0:
        raise DomainError(f"preference weight {weight} outside [0, 1]")
    return weight * alignment_reward(sample, prompt_id) + (1.0 - weight) * quality_reward(sample)


_REGISTRY: dict[str, Scorer] = {
    RewardKind.ALIGNMENT.value: alignment_reward,
    RewardKind.QUALITY.value: quality_reward,
    RewardKind.PREFERENCE.value: preference_reward,
}


def register_reward(name: str, scorer: Scorer) -> None:
    """Plug-in point: any (sample, prompt_id) -> float scorer may be registered."""
    _REGISTRY[name] = scorer


def get_scorer(kind: "RewardKind | str") -> Scorer:
    key = kind.value if isinstance(kind, RewardKind) else str(kind)
    if key not in _REGISTRY:
        raise DomainError(f"unknown reward kind {key!r}; known: {sorted(_REGISTRY)}")
    return _REGISTRY[key]


def grad_norm(params: Iterable[Tensor]) -> float:
    """Global L2 norm over all populated gradients of the given parameters."""
    total = 0.0
    seen = False
    for p in params:
        if p.grad is None:
            continue
        seen = True
        total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    if not seen:
        raise GradientsAbsentError("no gradients present; run backward first")
    return math.sqrt(total)
