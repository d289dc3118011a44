"""Gated cross-attention decoder stack.

Each layer runs causally masked self-attention over the partial answer,
then fuses two cross-attention readings, one over the encoder context and
one over the grounding features, through a pair of sigmoid gates, and
finishes with a position-wise FFN.  The gates are computed from the
concatenation of the self-attended answer with each reading, so the layer
can decide per position and per channel how much of each modality to let
through.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    NamedParams,
    causal_mask,
    sublayer,
)
from .tensor import Tensor


class GcaLayer:
    def __init__(self, d_model: int, d_ff: int, heads: int, rng: np.random.Generator, dtype):
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ctx_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.vis_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.gate_ctx = Linear(2 * d_model, d_model, rng, dtype)
        self.gate_vis = Linear(2 * d_model, d_model, rng, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)
        self.norms = [LayerNorm(d_model, dtype) for _ in range(3)]
        # populated on each forward pass, for range checks and inspection
        self.last_gates: tuple[np.ndarray, np.ndarray] | None = None

    def gated_cross_attention(self, attended: Tensor, c_t: Tensor, v_g: Tensor) -> Tensor:
        """Sigmoid-gated blend of context and grounding cross-attention."""
        ctx = self.ctx_attn(attended, c_t, c_t)
        vis = self.vis_attn(attended, v_g, v_g)
        alpha = T.sigmoid(self.gate_ctx(T.concat([attended, ctx], axis=1)))
        beta = T.sigmoid(self.gate_vis(T.concat([attended, vis], axis=1)))
        self.last_gates = (alpha.data.copy(), beta.data.copy())
        return T.add(T.hadamard(alpha, ctx), T.hadamard(beta, vis))

    def __call__(self, state: Tensor, c_t: Tensor, v_g: Tensor, mask: np.ndarray) -> Tensor:
        state = sublayer(state, lambda s: self.self_attn(s, s, s, mask=mask), self.norms[0])
        state = sublayer(state, lambda s: self.gated_cross_attention(s, c_t, v_g), self.norms[1])
        return sublayer(state, self.ffn, self.norms[2])

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.ctx_attn.named_parameters(f"{prefix}.ctx_attn")
        yield from self.vis_attn.named_parameters(f"{prefix}.vis_attn")
        yield from self.gate_ctx.named_parameters(f"{prefix}.gate_ctx")
        yield from self.gate_vis.named_parameters(f"{prefix}.gate_vis")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")
        for i, norm in enumerate(self.norms):
            yield from norm.named_parameters(f"{prefix}.norm{i}")


class GcadDecoder:
    """Stack of gated cross-attention layers over embedded answer prefixes."""

    def __init__(self, d_model: int, d_ff: int, heads: int, n_layers: int,
                 rng: np.random.Generator, dtype):
        self.layers = [GcaLayer(d_model, d_ff, heads, rng, dtype) for _ in range(n_layers)]

    def __call__(self, embedded: Tensor, c_t: Tensor, v_g: Tensor) -> Tensor:
        mask = causal_mask(embedded.shape[0])
        state = embedded
        for layer in self.layers:
            state = layer(state, c_t, v_g, mask)
        return state

    def named_parameters(self, prefix: str) -> NamedParams:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")
