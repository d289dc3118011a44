"""Multimodal incremental encoder.

Each dialogue round is encoded by the same layer stack, which attends the
round's utterance over three sources in order: itself, the round's
grounding features, and the context state produced by the previous round.
The stack output becomes the next context state, so round i's state is a
function of rounds 0..i only, and the caption passes through untouched as
the base state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn import FeedForward, LayerNorm, MultiHeadAttention, NamedParams, sublayer
from .tensor import Tensor


@dataclass
class ContextState:
    """Running encoder state after a round; the base state is the caption."""

    round_index: int
    values: Tensor


class MiteLayer:
    """Self-attention, grounding cross-attention, history attention, FFN."""

    def __init__(self, d_model: int, d_ff: int, heads: int, rng: np.random.Generator, dtype):
        self.self_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.vis_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.hist_attn = MultiHeadAttention(d_model, heads, rng, dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype)
        self.norms = [LayerNorm(d_model, dtype) for _ in range(4)]

    def __call__(self, state: Tensor, v_g: Tensor, c_prev: Tensor) -> Tensor:
        state = sublayer(state, lambda s: self.self_attn(s, s, s), self.norms[0])
        state = sublayer(state, lambda s: self.vis_attn(s, v_g, v_g), self.norms[1])
        state = sublayer(state, lambda s: self.hist_attn(s, c_prev, c_prev), self.norms[2])
        return sublayer(state, self.ffn, self.norms[3])

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.self_attn.named_parameters(f"{prefix}.self_attn")
        yield from self.vis_attn.named_parameters(f"{prefix}.vis_attn")
        yield from self.hist_attn.named_parameters(f"{prefix}.hist_attn")
        yield from self.ffn.named_parameters(f"{prefix}.ffn")
        for i, norm in enumerate(self.norms):
            yield from norm.named_parameters(f"{prefix}.norm{i}")


class MiteEncoder:
    """One shared layer stack applied at every round."""

    def __init__(self, d_model: int, d_ff: int, heads: int, n_layers: int,
                 rng: np.random.Generator, dtype):
        self.layers = [MiteLayer(d_model, d_ff, heads, rng, dtype) for _ in range(n_layers)]

    def encode_round(self, v_g: Tensor, utterance: Tensor, c_prev: ContextState,
                     round_index: int | None = None) -> ContextState:
        """Fold one round's utterance into a new context state."""
        if round_index is not None and round_index != c_prev.round_index + 1:
            raise ContractError(
                f"round {round_index} encoded against state of round {c_prev.round_index}"
            )
        state = utterance
        for layer in self.layers:
            state = layer(state, v_g, c_prev.values)
        return ContextState(c_prev.round_index + 1, state)

    def named_parameters(self, prefix: str) -> NamedParams:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layer{i}")
