"""Per-round visual grounding features.

The upstream grounding system (phrase extraction, co-reference, box
prediction) is replaced by oracle object indices carried in the dataset:
``select_grounding`` picks the named object rows, or falls back to every
object row when a question grounds nothing.  The selected rows are then
projected to model width and refined by a small self-attention stack.
Object rows are an unordered set, so no positional encoding is added and
the encoder is permutation-equivariant over objects.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .data import ImageFeatures
from .errors import DataError
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, NamedParams, sublayer
from .tensor import Tensor


def select_grounding(img: ImageFeatures, indices: Sequence[int]) -> np.ndarray:
    """Rows named by the grounding oracle; all rows when nothing grounded."""
    if not indices:
        return img.matrix.copy()
    for idx in indices:
        if not 0 <= idx < img.object_count:
            raise DataError(
                f"image {img.image_id}: grounding index {idx} >= object count {img.object_count}"
            )
    return img.matrix[list(indices)].copy()


class GroundingEncoder:
    """Feature-width projection followed by self-attention + FFN blocks."""

    def __init__(self, feature_dim: int, d_model: int, d_ff: int, heads: int,
                 n_layers: int, rng: np.random.Generator, dtype):
        self.proj = Linear(feature_dim, d_model, rng, dtype)
        self.blocks = []
        for _ in range(n_layers):
            self.blocks.append({
                "attn": MultiHeadAttention(d_model, heads, rng, dtype),
                "ffn": FeedForward(d_model, d_ff, rng, dtype),
                "norm_attn": LayerNorm(d_model, dtype),
                "norm_ffn": LayerNorm(d_model, dtype),
            })

    def __call__(self, raw: Tensor) -> Tensor:
        state = self.proj(raw)
        for block in self.blocks:
            state = sublayer(state, lambda s: block["attn"](s, s, s), block["norm_attn"])
            state = sublayer(state, block["ffn"], block["norm_ffn"])
        return state

    def encode(self, img: ImageFeatures, indices: Sequence[int], use_vg: bool,
               dtype=None) -> Tensor:
        """Grounding features for one round.

        With ``use_vg`` off (the ablation arm) the oracle indices are
        ignored and every object row is encoded, which coincides exactly
        with the empty-grounding fallback.
        """
        rows = select_grounding(img, indices if use_vg else [])
        raw = Tensor(rows, dtype=dtype or self.proj.weight.dtype)
        return self(raw)

    def named_parameters(self, prefix: str) -> NamedParams:
        yield from self.proj.named_parameters(f"{prefix}.proj")
        for i, block in enumerate(self.blocks):
            base = f"{prefix}.block{i}"
            yield from block["attn"].named_parameters(f"{base}.attn")
            yield from block["ffn"].named_parameters(f"{base}.ffn")
            yield from block["norm_attn"].named_parameters(f"{base}.norm_attn")
            yield from block["norm_ffn"].named_parameters(f"{base}.norm_ffn")
