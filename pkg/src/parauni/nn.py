"""Small neural-net building blocks on top of the tensor core.

Modules register parameters as attributes; `named_parameters` walks the
attribute tree and yields stable dotted names, which the checkpoint format
and optimizer rely on.
"""
from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class providing parameter discovery over attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(
            rng.standard_normal((in_dim, out_dim)) / math.sqrt(in_dim),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(out_dim, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim, dtype=np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gain, self.bias, self._eps)


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: large negatives strictly above the diagonal."""
    mask = np.zeros((length, length), dtype=np.float32)
    mask[np.triu_indices(length, k=1)] = -1e9
    return mask


class SelfAttention(Module):
    """Multi-head self-attention; heads are slices of the model width."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads
        self._causal = causal

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        mask = causal_mask(x.shape[0]) if self._causal else None
        head_dim = x.shape[1] // self._heads
        outs = []
        for h in range(self._heads):
            lo = h * head_dim
            outs.append(
                T.attention(
                    T.narrow(q, 1, lo, head_dim),
                    T.narrow(k, 1, lo, head_dim),
                    T.narrow(v, 1, lo, head_dim),
                    mask=mask,
                )
            )
        return self.wo(T.concat(outs, axis=1))


class CrossAttention(Module):
    """Multi-head attention from x onto an external conditioning sequence."""

    def __init__(self, dim: int, cond_dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(cond_dim, dim, rng)
        self.wv = Linear(cond_dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self._heads = heads

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(cond), self.wv(cond)
        head_dim = x.shape[1] // self._heads
        outs = []
        for h in range(self._heads):
            lo = h * head_dim
            outs.append(
                T.attention(
                    T.narrow(q, 1, lo, head_dim),
                    T.narrow(k, 1, lo, head_dim),
                    T.narrow(v, 1, lo, head_dim),
                )
            )
        return self.wo(T.concat(outs, axis=1))


class Mlp(Module):
    def __init__(self, dim: int, rng: np.random.Generator, hidden_mult: int = 4):
        self.fc1 = Linear(dim, hidden_mult * dim, rng)
        self.fc2 = Linear(hidden_mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class EncoderBlock(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, causal: bool = False):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng, causal=causal)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.mlp(self.ln2(x)))


class ConditionedBlock(Module):
    """Pre-norm block with self-attention, cross-attention and an MLP."""

    def __init__(self, dim: int, cond_dim: int, heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross = CrossAttention(dim, cond_dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.mlp = Mlp(dim, rng)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        x = T.add(x, self.cross(self.ln2(x), cond))
        return T.add(x, self.mlp(self.ln3(x)))


def sinusoidal_features(t: float, dim: int) -> np.ndarray:
    """Classic sin/cos features of a scalar time in [0, 1]."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t * freqs * 1000.0
    feats = np.concatenate([np.sin(angles), np.cos(angles)])
    if feats.size < dim:
        feats = np.concatenate([feats, np.zeros(dim - feats.size)])
    return feats.astype(np.float32)


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.float32(self.lr) * (update + np.float32(self.weight_decay) * p.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Serializable optimizer state, named for checkpoint round-trips."""
        out = {"opt.step": np.array([self.step_count], dtype=np.float32)}
        for key in self.params:
            out[f"opt.m.{key}"] = self.m[key]
            out[f"opt.v.{key}"] = self.v[key]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "opt.step" in arrays:
            self.step_count = int(arrays["opt.step"][0])
        for key in self.params:
            if f"opt.m.{key}" in arrays:
                self.m[key] = arrays[f"opt.m.{key}"].copy()
            if f"opt.v.{key}" in arrays:
                self.v[key] = arrays[f"opt.v.{key}"].copy()


def trainable(params: Iterable[Tensor]) -> list[Tensor]:
    return [p for p in params if p.requires_grad]
