"""Frozen transformer that exposes learnable-query features from every layer.

Prompt tokens and the learnable queries are concatenated into one sequence;
causal self-attention lets the queries read the prompt, and the query slice
of each block's output is recorded. Only the query embeddings are trainable;
the transformer itself stays frozen in every training stage.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DomainError, EmptinessError, VocabularyError
from .nn import EncoderBlock, Module
from .seeding import spawn_rng
from .tensor import Tensor


@dataclass
class VlmConfig:
    layers: int = 28
    width: int = 64
    heads: int = 4
    n_queries: int = 256
    vocab: int = 64
    max_prompt_len: int = 16

    def validate(self) -> "VlmConfig":
        if self.layers < 1:
            raise DomainError("vlm.layers must be >= 1")
        if self.width % self.heads != 0:
            raise DomainError(f"vlm.width {self.width} not divisible by heads {self.heads}")
        if self.n_queries < 1:
            raise DomainError("vlm.n_queries must be >= 1")
        if self.vocab < 1 or self.max_prompt_len < 1:
            raise DomainError("vlm.vocab and vlm.max_prompt_len must be >= 1")
        return self


@dataclass
class LayerFeatures:
    """Per-layer query features, one [N_q, width] tensor per block."""

    per_layer: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.per_layer)


class Vlm(Module):
    def __init__(self, config: VlmConfig, seed: int):
        config.validate()
        rng = spawn_rng("vlm", seed)
        d = config.width
        self.tok_embed = Tensor(rng.standard_normal((config.vocab, d)) * 0.02)
        self.prompt_pos = Tensor(rng.standard_normal((config.max_prompt_len, d)) * 0.02)
        # one shared positional vector for all query slots
        self.query_pos = Tensor(rng.standard_normal((1, d)) * 0.02)
        self.blocks = [
            EncoderBlock(d, config.heads, rng, causal=True) for _ in range(config.layers)
        ]
        for block in self.blocks:
            block.set_trainable(False)
        self.queries = Tensor(rng.standard_normal((config.n_queries, d)) * 0.02, requires_grad=True)
        self.config = config

    def frozen_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters().items() if k != "queries"}

    def forward_collect(
        self, prompt_tokens: Sequence[int], queries: Optional[Tensor] = None
    ) -> LayerFeatures:
        cfg = self.config
        tokens = list(prompt_tokens)
        if not tokens:
            raise EmptinessError("prompt must contain at least one token")
        if len(tokens) > cfg.max_prompt_len:
            raise DomainError(
                f"prompt length {len(tokens)} exceeds max_prompt_len {cfg.max_prompt_len}"
            )
        for tok in tokens:
            if not 0 <= int(tok) < cfg.vocab:
                raise VocabularyError(f"token {tok} outside vocabulary of size {cfg.vocab}")
        q = queries if queries is not None else self.queries
        prompt_x = T.add(
            T.gather_rows(self.tok_embed, tokens),
            T.narrow(self.prompt_pos, 0, 0, len(tokens)),
        )
        query_x = T.add(q, self.query_pos)
        x = T.concat([prompt_x, query_x], axis=0)
        feats = LayerFeatures()
        n_q = q.shape[0]
        for block in self.blocks:
            x = block(x)
            feats.per_layer.append(T.narrow(x, 0, len(tokens), n_q))
        return feats


def init_vlm(config: VlmConfig, seed: int) -> Vlm:
    """Build a VLM with frozen transformer weights and trainable queries."""
    return Vlm(config, seed)


def expected_parameter_count(config: VlmConfig) -> int:
    """Closed-form parameter census for a config (embeddings + blocks + queries)."""
    d = config.width
    block = (
        2 * d  # first layernorm
        + 4 * (d * d + d)  # q,k,v,o projections
        + 2 * d  # second layernorm
        + (d * 4 * d + 4 * d) + (4 * d * d + d)  # mlp
    )
    return (
        config.vocab * d
        + config.max_prompt_len * d
        + d  # shared query positional vector
        + config.layers * block
        + config.n_queries * d
    )
