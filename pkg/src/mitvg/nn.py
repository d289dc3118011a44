"""Transformer building blocks on top of the tensor primitives.

Everything here is a plain parameter bundle with a ``__call__`` forward
and a ``named_parameters`` walk used by the optimizer and the checkpoint
manifest.  Sub-layers are wired post-norm: ``LayerNorm(x + f(x))``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

MASK_VALUE = -1e9  # additive, keeps gradients finite unlike a true -inf

NamedParams = Iterator[tuple[str, Tensor]]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear:
    """Affine map ``x @ W + b``; set ``bias=False`` for a pure projection."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype, bias: bool = True):
        self.weight = uniform_init(rng, (d_in, d_out), d_in, dtype)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class LayerNorm:
    def __init__(self, d: int, dtype, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


def sublayer(x: Tensor, f: Callable[[Tensor], Tensor], norm: LayerNorm) -> Tensor:
    """Residual connection followed by layer normalization."""
    fx = f(x)
    if fx.shape != x.shape:
        raise ShapeError(f"sublayer function changed shape {tuple(x.shape)} -> {tuple(fx.shape)}")
    return norm(T.add(x, fx))


class PositionalEncoder:
    """Fixed sin/cos position table; row j, even dim 2k is sin(j / 10000^(2k/d))."""

    def __init__(self, d_model: int, max_len: int, dtype=np.float32):
        pos = np.arange(max_len, dtype=np.float64)[:, None]
        dims = np.arange(0, d_model, 2, dtype=np.float64)
        angles = pos / np.power(10000.0, dims / d_model)
        table = np.zeros((max_len, d_model), dtype=np.float64)
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
        self.table = table.astype(dtype)
        self.max_len = max_len

    def rows(self, length: int) -> Tensor:
        if length > self.max_len:
            raise ContractError(f"sequence length {length} exceeds position table ({self.max_len})")
        return Tensor(self.table[:length].copy())


class EmbeddingTable:
    """One token-embedding table shared by history, questions and answers."""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, dtype):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.weight = uniform_init(rng, (vocab_size, d_model), d_model, dtype)

    def __call__(self, ids: Sequence[int]) -> Tensor:
        return T.embedding(self.weight, ids)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield f"{prefix}.weight", self.weight


def embed_sequence(table: EmbeddingTable, pos: PositionalEncoder, ids: Sequence[int]) -> Tensor:
    """Token embeddings with positional encoding added, positions 0-based."""
    if len(ids) < 1:
        raise ContractError("embed_sequence needs at least one token")
    return T.add(table(ids), pos.rows(len(ids)))


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    ``mask`` is a boolean matrix (queries x keys); True entries are blocked
    by adding MASK_VALUE before the softmax.  After every forward pass
    ``last_weights`` holds one (L_q, L_k) weight matrix per head, for
    inspection only (not part of the autodiff graph).
    """

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator, dtype):
        if d_model % heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.w_q = Linear(d_model, d_model, rng, dtype, bias=False)
        self.w_k = Linear(d_model, d_model, rng, dtype, bias=False)
        self.w_v = Linear(d_model, d_model, rng, dtype, bias=False)
        self.w_o = Linear(d_model, d_model, rng, dtype, bias=False)
        self.last_weights: list[np.ndarray] = []

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 mask: Optional[np.ndarray] = None) -> Tensor:
        if key.shape[0] != value.shape[0]:
            raise ShapeError(f"key rows {key.shape[0]} != value rows {value.shape[0]}")
        if mask is not None and mask.shape != (query.shape[0], key.shape[0]):
            raise ShapeError(
                f"mask shape {mask.shape} does not match ({query.shape[0]}, {key.shape[0]})"
            )
        q = self.w_q(query)
        k = self.w_k(key)
        v = self.w_v(value)
        additive = None
        if mask is not None:
            additive = Tensor(np.where(mask, MASK_VALUE, 0.0).astype(q.dtype))
        heads_out = []
        self.last_weights = []
        inv_sqrt = 1.0 / math.sqrt(self.d_head)
        for h in range(self.heads):
            lo, hi = h * self.d_head, (h + 1) * self.d_head
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
            if additive is not None:
                scores = T.add(scores, additive)
            weights = T.softmax(scores, axis=1)
            self.last_weights.append(weights.data.copy())
            heads_out.append(T.matmul(weights, vh))
        merged = heads_out[0] if self.heads == 1 else T.concat(heads_out, axis=1)
        return self.w_o(merged)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.w_q.named_parameters(f"{prefix}.w_q")
        yield from self.w_k.named_parameters(f"{prefix}.w_k")
        yield from self.w_v.named_parameters(f"{prefix}.w_v")
        yield from self.w_o.named_parameters(f"{prefix}.w_o")


class FeedForward:
    """Position-wise two-layer network with relu in between."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype):
        self.inner = Linear(d_model, d_ff, rng, dtype)
        self.outer = Linear(d_ff, d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(T.relu(self.inner(x)))

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.inner.named_parameters(f"{prefix}.inner")
        yield from self.outer.named_parameters(f"{prefix}.outer")


def causal_mask(length: int) -> np.ndarray:
    """Blocks attention to strictly later positions."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)
