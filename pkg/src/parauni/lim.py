"""Layer Integration Module: shared encoding of every layer's query features.

Each layer's [N_q, width] feature block passes through one shared transformer
stack and a final layernorm; the per-layer results are mean-fused into a
single condition. Multiplicative masks (installed by the adjustment
controller) apply to the normalized per-layer encodings before fusion.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import DomainError, EmptinessError, LayerIndexError, ShapeError
from .nn import EncoderBlock, LayerNorm, Linear, Module
from .seeding import spawn_rng
from .tensor import Tensor
from .vlm import LayerFeatures


@dataclass
class LimConfig:
    width: int = 64
    heads: int = 4
    blocks: int = 1
    out_width: Optional[int] = None  # None keeps the input width
    layer_embed: bool = False  # optional per-layer offset, off by default
    layer_count: int = 0  # required only when layer_embed is on

    def validate(self) -> "LimConfig":
        if self.width < 1 or self.blocks < 1:
            raise DomainError("lim.width and lim.blocks must be >= 1")
        if self.width % self.heads != 0:
            raise DomainError(f"lim.width {self.width} not divisible by heads {self.heads}")
        if self.layer_embed and self.layer_count < 1:
            raise DomainError("lim.layer_embed requires lim.layer_count >= 1")
        return self

    @property
    def cond_width(self) -> int:
        return self.out_width if self.out_width else self.width


class LayerMaskSet:
    """Optional multiplicative masks keyed by 1-based layer index."""

    def __init__(self, masks: Optional[dict[int, np.ndarray]] = None):
        self.masks: dict[int, np.ndarray] = {}
        for layer, mask in (masks or {}).items():
            arr = np.asarray(mask, dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"mask for layer {layer} contains non-finite values")
            self.masks[int(layer)] = arr

    @classmethod
    def identity(cls) -> "LayerMaskSet":
        return cls()

    def get(self, layer: int) -> Optional[np.ndarray]:
        return self.masks.get(layer)

    def validate_for(self, layer_count: int) -> None:
        for layer in self.masks:
            if not 1 <= layer <= layer_count:
                raise LayerIndexError(
                    f"mask layer {layer} outside 1..{layer_count}"
                )

    def __len__(self) -> int:
        return len(self.masks)


class Lim(Module):
    def __init__(self, config: LimConfig, seed: int):
        config.validate()
        rng = spawn_rng("lim", seed)
        self.blocks = [
            EncoderBlock(config.width, config.heads, rng) for _ in range(config.blocks)
        ]
        self.proj = (
            Linear(config.width, config.out_width, rng)
            if config.out_width and config.out_width != config.width
            else None
        )
        self.out_ln = LayerNorm(config.cond_width)
        self.layer_offsets = (
            Tensor(rng.standard_normal((config.layer_count, config.width)) * 0.02,
                   requires_grad=True)
            if config.layer_embed
            else None
        )
        self.config = config


def encode_layer(lim: Lim, features: Tensor, layer: Optional[int] = None) -> Tensor:
    """Shared-transformer encoding of one layer's features, then layernorm."""
    x = features
    if lim.layer_offsets is not None and layer is not None:
        x = T.add(x, T.narrow(lim.layer_offsets, 0, layer - 1, 1))
    for block in lim.blocks:
        x = block(x)
    if lim.proj is not None:
        x = lim.proj(x)
    return lim.out_ln(x)


def _masked(encoded: Tensor, masks: Optional[LayerMaskSet], layer: int) -> Tensor:
    if masks is None:
        return encoded
    mask = masks.get(layer)
    if mask is None:
        return encoded
    if mask.shape != encoded.shape:
        raise ShapeError(f"mask shape {mask.shape} != condition shape {encoded.shape}")
    return T.mul(encoded, Tensor(mask))


def integrate(
    lim: Lim, features: LayerFeatures, masks: Optional[LayerMaskSet] = None
) -> Tensor:
    """Mean-fuse the encoded per-layer features into one condition."""
    n = len(features)
    if n == 0:
        raise EmptinessError("no layer features to integrate")
    if masks is not None:
        masks.validate_for(n)
    acc = None
    for i, layer_feats in enumerate(features.per_layer, start=1):
        c = _masked(encode_layer(lim, layer_feats, i), masks, i)
        acc = c if acc is None else T.add(acc, c)
    return T.scale(acc, 1.0 / n)


def integrate_single(lim: Lim, features: LayerFeatures, layer: int) -> Tensor:
    """Condition on one layer only (used by the per-layer sweep)."""
    n = len(features)
    if not 1 <= layer <= n:
        raise LayerIndexError(f"layer {layer} outside 1..{n}")
    return encode_layer(lim, features.per_layer[layer - 1], layer)


def integrate_subset(
    lim: Lim,
    features: LayerFeatures,
    keep: Iterable[int],
    masks: Optional[LayerMaskSet] = None,
) -> Tensor:
    """Mean-fuse over a subset of layers; the divisor is the subset size."""
    kept = sorted(set(int(i) for i in keep))
    if not kept:
        raise EmptinessError("integrate_subset: empty layer subset")
    n = len(features)
    for i in kept:
        if not 1 <= i <= n:
            raise LayerIndexError(f"layer {i} outside 1..{n}")
    if masks is not None:
        masks.validate_for(n)
    acc = None
    for i in kept:
        c = _masked(encode_layer(lim, features.per_layer[i - 1], i), masks, i)
        acc = c if acc is None else T.add(acc, c)
    return T.scale(acc, 1.0 / len(kept))
