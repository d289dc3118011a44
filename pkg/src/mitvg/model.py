"""Full model assembly, loss, and checkpoint round-tripping.

``MitvgModel`` owns the shared embedding table and wires the grounding
encoder, the incremental dialogue encoder and the gated decoder together.
Token-level entry points live here because they need the vocabulary, the
embedding table and the output head at once: encoding a dialogue up to a
round, teacher-forced decoding, greedy generation, candidate scoring and
the training loss.

Checkpoints are self-contained: magic ``MITV``, a u16 format version, a
u32 header length, a JSON header holding the config, the vocabulary and a
named parameter manifest (shape + byte offset per entry), then the raw
little-endian float32 parameter data in manifest order.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, SEP, DialogueExample, Vocabulary
from .errors import ContractError, DataError, FormatError, ShapeError
from .gcad import GcadDecoder
from .grounding import GroundingEncoder
from .mite import ContextState, MiteEncoder
from .nn import EmbeddingTable, Linear, PositionalEncoder, embed_sequence
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MITV"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Hyperparameters; the defaults are the full-scale reference shapes."""

    d_model: int = 512
    heads: int = 8
    d_ff: int = 2048
    vg_layers: int = 3
    encoder_layers: int = 3
    decoder_layers: int = 3
    max_caption_len: int = 40
    max_question_len: int = 20
    max_answer_len: int = 20
    vocab_min_count: int = 5
    feature_dim: int = 2048
    warmup_steps: int = 4000
    seed: int = 0
    precision: str = "float32"
    use_vg: bool = True
    dropout: float = 0.0
    tie_final_round: bool = True
    length_normalized_scores: bool = False
    grad_accum: int = 1

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for name in ("max_caption_len", "max_question_len", "max_answer_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ContractError(f"unknown precision {self.precision!r}")
        if self.grad_accum < 1:
            raise ContractError("grad_accum must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Small profile for desk-scale training runs."""
        base = dict(d_model=64, heads=4, d_ff=128, vg_layers=1, encoder_layers=1,
                    decoder_layers=1, feature_dim=64, warmup_steps=200, vocab_min_count=1)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Minimal profile for gradient verification at float64."""
        base = dict(d_model=8, heads=2, d_ff=16, vg_layers=1, encoder_layers=1,
                    decoder_layers=1, feature_dim=8, warmup_steps=200,
                    vocab_min_count=1, precision="float64")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ContractError(f"unknown config key: {sorted(unknown)[0]}")
        return cls(**values)


class MitvgModel:
    """Grounding encoder + incremental dialogue encoder + gated decoder."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        if config.dropout > 0:
            log.warning("dropout=%.3f requested but dropout is not implemented; ignoring",
                        config.dropout)
        dtype = config.dtype
        rng = np.random.default_rng(config.seed)
        max_positions = max(
            config.max_caption_len,
            config.max_question_len + config.max_answer_len + 1,
            config.max_answer_len + 1,
        )
        self.embedding = EmbeddingTable(len(vocab), config.d_model, rng, dtype)
        self.pos = PositionalEncoder(config.d_model, max_positions, dtype)
        self.grounding = GroundingEncoder(
            config.feature_dim, config.d_model, config.d_ff, config.heads,
            config.vg_layers, rng, dtype,
        )
        self.encoder = MiteEncoder(
            config.d_model, config.d_ff, config.heads, config.encoder_layers, rng, dtype,
        )
        if config.tie_final_round:
            self.final_encoder = self.encoder
        else:
            self.final_encoder = MiteEncoder(
                config.d_model, config.d_ff, config.heads, config.encoder_layers, rng, dtype,
            )
        self.decoder = GcadDecoder(
            config.d_model, config.d_ff, config.heads, config.decoder_layers, rng, dtype,
        )
        self.head = Linear(config.d_model, len(vocab), rng, dtype)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        yield from self.embedding.named_parameters("embedding")
        yield from self.grounding.named_parameters("grounding")
        yield from self.encoder.named_parameters("encoder")
        if self.final_encoder is not self.encoder:
            yield from self.final_encoder.named_parameters("final_encoder")
        yield from self.decoder.named_parameters("decoder")
        yield from self.head.named_parameters("head")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- encoding -----------------------------------------------------------

    def _embed_tokens(self, tokens: Sequence[str]) -> Tensor:
        return embed_sequence(self.embedding, self.pos, self.vocab.encode(tokens))

    def _embed_ids(self, ids: Sequence[int]) -> Tensor:
        return embed_sequence(self.embedding, self.pos, ids)

    def encode_dialogue(self, example: DialogueExample, t: int,
                        use_vg: Optional[bool] = None,
                        history_cache: Optional[dict] = None,
                        ) -> tuple[ContextState, Tensor]:
        """Context state after folding in rounds 1..t-1 and question t.

        Returns the final context state together with round t's grounding
        features, which the decoder consumes alongside it.  When a
        ``history_cache`` dict is supplied (evaluation only, no gradient
        tape may be active) the shared history chain is reused across
        rounds of the same example.
        """
        if use_vg is None:
            use_vg = self.config.use_vg
        if example.features is None:
            raise DataError(f"image {example.image_id}: features not attached")
        if not 1 <= t <= len(example.rounds):
            raise ContractError(f"round {t} outside 1..{len(example.rounds)}")
        for i in range(1, t):
            if not example.rounds[i - 1].answer:
                raise DataError(f"image {example.image_id}: history round {i} has no answer")

        cache_key = "vg" if use_vg else "novg"
        chain: list[ContextState] = []
        if history_cache is not None:
            if T._active_tape() is not None:
                raise ContractError("history_cache must not be used under a gradient tape")
            chain = history_cache.setdefault(cache_key, [])
        if not chain:
            chain.append(ContextState(0, self._embed_tokens(example.caption)))
        while len(chain) < t:
            i = len(chain)  # next history round to fold in
            rnd = example.rounds[i - 1]
            utterance = self._embed_ids(
                self.vocab.encode(rnd.question) + [SEP] + self.vocab.encode(rnd.answer)
            )
            v_g = self.grounding.encode(example.features, rnd.grounding, use_vg,
                                        dtype=self.config.dtype)
            chain.append(self.encoder.encode_round(v_g, utterance, chain[i - 1], round_index=i))

        final_round = example.rounds[t - 1]
        question = self._embed_tokens(final_round.question)
        v_g_t = self.grounding.encode(example.features, final_round.grounding, use_vg,
                                      dtype=self.config.dtype)
        c_t = self.final_encoder.encode_round(v_g_t, question, chain[t - 1], round_index=t)
        return c_t, v_g_t

    # -- decoding -----------------------------------------------------------

    @staticmethod
    def _context_values(c_t) -> Tensor:
        return c_t.values if isinstance(c_t, ContextState) else c_t

    def _decode_logits(self, input_ids: Sequence[int], c_t, v_g: Tensor) -> Tensor:
        hidden = self.decoder(self._embed_ids(input_ids), self._context_values(c_t), v_g)
        return self.head(hidden)

    def decode_teacher_forced(self, answer_ids: Sequence[int], c_t, v_g: Tensor) -> Tensor:
        """Per-position word probabilities for an answer plus its end marker."""
        if len(answer_ids) == 0:
            raise ContractError("cannot teacher-force an empty answer")
        if len(answer_ids) > self.config.max_answer_len:
            raise ContractError(
                f"answer length {len(answer_ids)} exceeds {self.config.max_answer_len}"
            )
        logits = self._decode_logits([BOS] + list(answer_ids), c_t, v_g)
        return T.softmax(logits, axis=1)

    def score_candidate(self, candidate_ids: Sequence[int], c_t, v_g: Tensor,
                        normalize: Optional[bool] = None) -> float:
        """Log-likelihood of a candidate answer, end marker included.

        The default is the plain sum over positions; ``normalize`` divides
        by the number of scored positions instead.
        """
        if normalize is None:
            normalize = self.config.length_normalized_scores
        ids = list(candidate_ids)[: self.config.max_answer_len]
        targets = ids + [EOS]
        logp = T.log_softmax(self._decode_logits([BOS] + ids, c_t, v_g), axis=1)
        total = float(T.pick(logp, targets).data.sum())
        return total / len(targets) if normalize else total

    def generate(self, c_t, v_g: Tensor, max_len: Optional[int] = None) -> list[int]:
        """Greedy decoding from the start marker until the end marker."""
        if max_len is None:
            max_len = self.config.max_answer_len
        prefix = [BOS]
        out: list[int] = []
        for _ in range(max_len):
            logits = self._decode_logits(prefix, c_t, v_g)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == EOS:
                break
            out.append(nxt)
            prefix.append(nxt)
        return out

    def generate_text(self, c_t, v_g: Tensor, max_len: Optional[int] = None) -> str:
        return " ".join(self.vocab.decode(self.generate(c_t, v_g, max_len)))

    # -- training loss ------------------------------------------------------

    def forward_loss(self, example: DialogueExample, t: int,
                     use_vg: Optional[bool] = None) -> Tensor:
        """Mean token-level cross-entropy of the round-t answer plus end marker."""
        rnd = example.rounds[t - 1]
        if not rnd.answer:
            raise DataError(f"image {example.image_id} round {t}: empty answer")
        c_t, v_g = self.encode_dialogue(example, t, use_vg=use_vg)
        ids = self.vocab.encode(rnd.answer)[: self.config.max_answer_len]
        targets = ids + [EOS]
        logp = T.log_softmax(self._decode_logits([BOS] + ids, c_t, v_g), axis=1)
        picked = T.pick(logp, targets)
        return T.scale(T.sum_all(picked), -1.0 / len(targets))

    # -- checkpoints --------------------------------------------------------

    def save(self, path) -> None:
        manifest = []
        offset = 0
        blobs = []
        for name, p in self.named_parameters():
            blob = p.data.astype("<f4").tobytes(order="C")
            manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = {
            "config": asdict(self.config),
            "vocab": {"min_count": self.vocab.min_count, "tokens": self.vocab.tokens},
            "params": manifest,
        }
        header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path, precision: Optional[str] = None) -> "MitvgModel":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
        if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
            raise FormatError("checkpoint magic mismatch (expected MITV)")
        (version,) = struct.unpack("<H", blob[4:6])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (header_len,) = struct.unpack("<I", blob[6:10])
        if len(blob) < 10 + header_len:
            raise FormatError("checkpoint truncated inside header")
        try:
            header = json.loads(blob[10:10 + header_len].decode("utf-8"))
            config_values = dict(header["config"])
            vocab = Vocabulary(header["vocab"]["tokens"], int(header["vocab"]["min_count"]))
            manifest = header["params"]
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError,
                DataError, ValueError) as exc:
            raise FormatError(f"bad checkpoint header: {exc}") from exc
        if precision is not None:
            config_values["precision"] = precision
        try:
            config = ModelConfig.from_dict(config_values)
        except (ContractError, TypeError) as exc:
            raise FormatError(f"bad checkpoint config: {exc}") from exc

        model = cls(config, vocab)
        data = blob[10 + header_len:]
        named = dict(model.named_parameters())
        if (not isinstance(manifest, list)
                or not all(isinstance(e, dict) for e in manifest)
                or {e.get("name") for e in manifest} != set(named)
                or len(manifest) != len(named)):
            raise FormatError("checkpoint manifest does not match model parameters")
        total = 0
        for entry in manifest:
            p = named[entry["name"]]
            shape = entry.get("shape")
            start = entry.get("offset")
            if (not isinstance(shape, list) or not all(isinstance(s, int) for s in shape)
                    or not isinstance(start, int) or start < 0):
                raise FormatError(f"parameter {entry['name']}: malformed manifest entry")
            if list(p.shape) != shape:
                raise FormatError(
                    f"parameter {entry['name']}: shape {shape} != {list(p.shape)}"
                )
            n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            if start + n_bytes > len(data):
                raise FormatError(f"checkpoint truncated at parameter {entry['name']}")
            values = np.frombuffer(data[start:start + n_bytes], dtype="<f4")
            if not np.all(np.isfinite(values)):
                raise FormatError(f"parameter {entry['name']}: non-finite values")
            p.data = values.reshape(p.shape).astype(config.dtype)
            total += n_bytes
        if total != len(data):
            raise FormatError("checkpoint has trailing bytes")
        return model


def build_model(config: ModelConfig, vocab: Vocabulary) -> MitvgModel:
    return MitvgModel(config, vocab)
