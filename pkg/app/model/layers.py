"""Parameterised building blocks shared by the encoders and the alignment module."""
import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from app.exceptions import DataError, DimensionError
from app import tensor as T
from app.tensor import Tensor, parameter

logger = logging.getLogger(__name__)


class Module:
    """Holds parameters as attributes; sub-modules may sit in attributes or lists."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{index}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise DataError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, array in state.items():
            if name not in own:
                continue
            target = own[name]
            if tuple(array.shape) != target.shape:
                raise DataError(
                    f"state dict entry {name!r} has shape {tuple(array.shape)}, expected {target.shape}"
                )
            target.data = np.array(array, dtype=target.dtype)
            target.grad = None


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = parameter(uniform_init(rng, (in_dim, out_dim), in_dim))
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"linear: expected last dim {self.in_dim}, got shape {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered * T.power(var + self.eps, -0.5) * self.gamma + self.beta


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator):
        self.weight = parameter(uniform_init(rng, (count, dim), dim))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class FeedForward(Module):
    """Two-layer GELU MLP."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out_dim: Optional[int] = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out_dim or dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., heads, L, D / heads)"""
    *lead, length, dim = x.shape
    x = x.reshape(tuple(lead) + (length, heads, dim // heads))
    return T.swapaxes(x, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, dk) -> (..., L, heads * dk)"""
    x = T.swapaxes(x, -2, -3)
    *lead, length, heads, dk = x.shape
    return x.reshape(tuple(lead) + (length, heads * dk))


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, key_valid: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(dk)) v with optional key validity mask (True = attend).

    Leading dimensions of ``q`` and ``k``/``v`` broadcast, so a (Q, 1, ...) query
    block against a (1, N, ...) key block yields every query/key-set pair.
    """
    logits = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / np.sqrt(q.shape[-1]))
    weights = T.softmax(logits, axis=-1, mask=key_valid)
    return weights @ v, weights


class MultiHeadAttention(Module):
    """Multi-head attention whose query and key/value batch dims may broadcast.

    ``key_valid`` has the key/value batch shape plus the key length and is
    True where a key may be attended.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise DimensionError(f"attention: dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, bias=False)
        self.k_proj = Linear(dim, dim, rng, bias=False)
        self.v_proj = Linear(dim, dim, rng, bias=False)
        self.out_proj = Linear(dim, dim, rng)

    def attend(
        self, query: Tensor, key_value: Tensor, key_valid: Optional[np.ndarray] = None
    ) -> Tuple[Tensor, Tensor]:
        """Head-merged attention output before ``out_proj`` and the weights (..., heads, Lq, Lk)."""
        q = split_heads(self.q_proj(query), self.heads)
        k = split_heads(self.k_proj(key_value), self.heads)
        v = split_heads(self.v_proj(key_value), self.heads)
        mask = None
        if key_valid is not None:
            key_valid = np.asarray(key_valid, dtype=bool)
            mask = key_valid.reshape(key_valid.shape[:-1] + (1, 1, key_valid.shape[-1]))
        out, weights = scaled_dot_attention(q, k, v, mask)
        return merge_heads(out), weights

    def forward(
        self, query: Tensor, key_value: Tensor, key_valid: Optional[np.ndarray] = None
    ) -> Tuple[Tensor, Tensor]:
        out, weights = self.attend(query, key_value, key_valid)
        return self.out_proj(out), weights


class EncoderBlock(Module):
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)

    def forward(self, x: Tensor, key_valid: Optional[np.ndarray] = None) -> Tensor:
        h = self.norm1(x)
        attn, _ = self.attn(h, h, key_valid)
        x = x + attn
        return x + self.ff(self.norm2(x))
