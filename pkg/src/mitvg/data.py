"""Datasets: tokenization, vocabulary, file formats, synthetic dialogues.

Two on-disk formats are defined here and are bit-exact by contract:

* dialogue datasets: JSON-lines, one object per dialogue with keys
  ``image_id``, ``caption`` and ``rounds`` (each round carries ``question``,
  ``answer``, ``grounding`` and optionally ``candidates``/``gt_index``/
  ``relevance``);
* image features: binary, magic ``MITF``, u32 image count, then per image
  u64 image_id, u32 K, u32 V and K*V little-endian float32 values.

The synthetic generator builds a closed-world benchmark: each image is a
handful of objects with color / shape / count attributes, questions ask
for one attribute of one object, and the asked object's index is stored
as the oracle grounding for that round.  Every fourth round asks a
question that names no object and carries an empty grounding list, which
exercises the whole-image fallback.
"""

from __future__ import annotations

import io
import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError, FormatError

PAD, UNK, BOS, EOS, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["<pad>", "<unk>", "<bos>", "<eos>", "<sep>"]

MAX_CAPTION_TOKENS = 40
MAX_QUESTION_TOKENS = 20
MAX_ANSWER_TOKENS = 20

_DIGIT_WORDS = {
    "0": "zero", "1": "one", "2": "two", "3": "three", "4": "four",
    "5": "five", "6": "six", "7": "seven", "8": "eight", "9": "nine",
}
_PUNCT_RE = re.compile(r"([^\w\s])")


def normalize_and_tokenize(text: str) -> list[str]:
    """Lowercase, spell out digits, drop apostrophes, split punctuation."""
    s = text.lower()
    s = "".join(f" {_DIGIT_WORDS[ch]} " if ch in _DIGIT_WORDS else ch for ch in s)
    s = s.replace("'", " ")
    s = _PUNCT_RE.sub(r" \1 ", s)
    return s.split()


class Vocabulary:
    """Token ids with the five specials pinned to ids 0..4."""

    def __init__(self, tokens: Sequence[str], min_count: int):
        self.tokens = list(tokens)
        self.min_count = min_count
        if self.tokens[:5] != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the special tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(tok, UNK) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        payload = {"min_count": self.min_count, "tokens": self.tokens}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=0)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
            return cls(payload["tokens"], int(payload["min_count"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad vocabulary file {path}: {exc}") from exc


def build_vocab(token_sequences: Iterable[Sequence[str]], min_count: int = 5) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, ordered by count then token."""
    counts: Counter[str] = Counter()
    for seq in token_sequences:
        counts.update(seq)
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(SPECIAL_TOKENS + kept, min_count)


# ---------------------------------------------------------------------------
# dataset records
# ---------------------------------------------------------------------------


@dataclass
class DialogueRound:
    question: list[str]
    answer: list[str]
    grounding: list[int]
    candidates: Optional[list[str]] = None
    gt_index: Optional[int] = None
    relevance: Optional[list[float]] = None


@dataclass
class ImageFeatures:
    """Object-level feature rows for one image (K objects, V dims each)."""

    image_id: int
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise DataError(f"image {self.image_id}: feature matrix must be K x V with K >= 1")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError(f"image {self.image_id}: non-finite feature values")

    @property
    def object_count(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.matrix.shape[1])


@dataclass
class DialogueExample:
    image_id: int
    caption: list[str]
    rounds: list[DialogueRound]
    features: Optional[ImageFeatures] = field(default=None, repr=False)


def _require(cond: bool, line: int, message: str) -> None:
    if not cond:
        raise DataError(f"line {line}: {message}")


def _parse_round(obj, line: int, number: int) -> DialogueRound:
    _require(isinstance(obj, dict), line, f"round {number} must be an object")
    for key in ("question", "answer"):
        _require(isinstance(obj.get(key), str), line, f"round {number}: missing text field '{key}'")
    grounding = obj.get("grounding", [])
    _require(
        isinstance(grounding, list) and all(isinstance(i, int) and i >= 0 for i in grounding),
        line, f"round {number}: field 'grounding' must be a list of non-negative ints",
    )
    question = normalize_and_tokenize(obj["question"])[:MAX_QUESTION_TOKENS]
    answer = normalize_and_tokenize(obj["answer"])[:MAX_ANSWER_TOKENS]
    _require(len(question) > 0, line, f"round {number}: empty question")
    _require(len(answer) > 0, line, f"round {number}: empty answer")

    candidates = obj.get("candidates")
    gt_index = obj.get("gt_index")
    relevance = obj.get("relevance")
    if candidates is not None:
        _require(
            isinstance(candidates, list) and len(candidates) == 100
            and all(isinstance(c, str) for c in candidates),
            line, f"round {number}: field 'candidates' must be a list of 100 strings",
        )
        _require(
            isinstance(gt_index, int) and 0 <= gt_index < 100,
            line, f"round {number}: field 'gt_index' must be an int in [0, 100)",
        )
    else:
        _require(gt_index is None, line, f"round {number}: 'gt_index' without 'candidates'")
        _require(relevance is None, line, f"round {number}: 'relevance' without 'candidates'")
    if relevance is not None:
        _require(
            isinstance(relevance, list) and len(relevance) == len(candidates)
            and all(isinstance(r, (int, float)) and 0.0 <= float(r) <= 1.0 for r in relevance),
            line, f"round {number}: field 'relevance' must be 100 values in [0, 1]",
        )
        relevance = [float(r) for r in relevance]
    return DialogueRound(question, answer, list(grounding), candidates, gt_index, relevance)


def _parse_example(obj, line: int) -> DialogueExample:
    _require(isinstance(obj, dict), line, "record must be a JSON object")
    _require(isinstance(obj.get("image_id"), int) and obj["image_id"] >= 0,
             line, "field 'image_id' must be a non-negative int")
    _require(isinstance(obj.get("caption"), str), line, "missing text field 'caption'")
    _require(isinstance(obj.get("rounds"), list) and len(obj["rounds"]) > 0,
             line, "field 'rounds' must be a non-empty list")
    caption = normalize_and_tokenize(obj["caption"])[:MAX_CAPTION_TOKENS]
    _require(len(caption) > 0, line, "empty caption")
    rounds = [_parse_round(r, line, i + 1) for i, r in enumerate(obj["rounds"])]
    return DialogueExample(obj["image_id"], caption, rounds)


def load_dataset(path) -> list[DialogueExample]:
    """Parse and validate a JSON-lines dialogue file; truncation applies here."""
    examples = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON: {exc}") from exc
        examples.append(_parse_example(obj, lineno))
    if not examples:
        raise DataError(f"dataset {path} contains no records")
    return examples


def write_dataset(examples: Sequence[DialogueExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rounds = []
            for rnd in ex.rounds:
                obj = {
                    "question": " ".join(rnd.question),
                    "answer": " ".join(rnd.answer),
                    "grounding": rnd.grounding,
                }
                if rnd.candidates is not None:
                    obj["candidates"] = rnd.candidates
                    obj["gt_index"] = rnd.gt_index
                if rnd.relevance is not None:
                    obj["relevance"] = rnd.relevance
                rounds.append(obj)
            record = {"image_id": ex.image_id, "caption": " ".join(ex.caption), "rounds": rounds}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# feature file io
# ---------------------------------------------------------------------------

FEATURE_MAGIC = b"MITF"


def write_features(features: Sequence[ImageFeatures], path) -> None:
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(features)))
        for feat in features:
            k, v = feat.matrix.shape
            fh.write(struct.pack("<QII", feat.image_id, k, v))
            fh.write(feat.matrix.astype("<f4", copy=False).tobytes(order="C"))


def load_features(path) -> dict[int, ImageFeatures]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read feature file {path}: {exc}") from exc
    stream = io.BytesIO(blob)

    def take(n: int, what: str) -> bytes:
        chunk = stream.read(n)
        if len(chunk) != n:
            raise FormatError(f"feature file truncated while reading {what}")
        return chunk

    if take(4, "magic") != FEATURE_MAGIC:
        raise FormatError("feature file magic mismatch (expected MITF)")
    (count,) = struct.unpack("<I", take(4, "image count"))
    out: dict[int, ImageFeatures] = {}
    for i in range(count):
        image_id, k, v = struct.unpack("<QII", take(16, f"header of image {i}"))
        if k < 1 or v < 1 or k * v > 10**8:
            raise FormatError(f"image {image_id}: implausible dimensions K={k} V={v}")
        raw = take(4 * k * v, f"data of image {image_id}")
        matrix = np.frombuffer(raw, dtype="<f4").reshape(k, v).copy()
        try:
            out[image_id] = ImageFeatures(image_id, matrix)
        except DataError as exc:
            raise FormatError(str(exc)) from exc
    if stream.read(1):
        raise FormatError("feature file has trailing bytes")
    if not out:
        raise FormatError("feature file contains no images")
    return out


def attach_features(examples: Sequence[DialogueExample],
                    features) -> None:
    """Join features onto examples and validate grounding indices against K.

    ``features`` may be the dict form returned by ``load_features`` or the
    plain list produced by the synthetic generator.
    """
    if not isinstance(features, dict):
        features = {f.image_id: f for f in features}
    for ex in examples:
        feat = features.get(ex.image_id)
        if feat is None:
            raise DataError(f"image {ex.image_id}: no feature entry")
        for number, rnd in enumerate(ex.rounds, start=1):
            for idx in rnd.grounding:
                if idx >= feat.object_count:
                    raise DataError(
                        f"image {ex.image_id} round {number}: grounding index {idx} "
                        f">= object count {feat.object_count}"
                    )
        ex.features = feat


# ---------------------------------------------------------------------------
# synthetic world
# ---------------------------------------------------------------------------

COLORS = ["red", "blue", "green", "yellow", "black", "white", "purple", "orange"]
SHAPES = ["ball", "cube", "chair", "lamp", "vase", "clock", "plant", "book", "bottle", "drum"]
COUNT_WORDS = ["one", "two", "three", "four", "five", "six"]
FALLBACK_QUESTION = "anything else ?"
FALLBACK_ANSWER = "no"

N_CANDIDATES = 100
FEATURE_NOISE = 0.01


def _candidate_pool() -> list[str]:
    pool = COLORS + COUNT_WORDS + [FALLBACK_ANSWER]
    pool += [f"{c} {s}" for c in COLORS for s in SHAPES]
    pool += [f"{n} {s}" for n in COUNT_WORDS for s in SHAPES]
    return pool


def _object_features(color: int, shape: int, count: int, dim: int,
                     rng: np.random.Generator) -> np.ndarray:
    # answer-bearing blocks (count, color) lead the pattern so the final
    # partial tile repeats them rather than the shape block
    onehot = np.zeros(len(COUNT_WORDS) + len(COLORS) + len(SHAPES), dtype=np.float64)
    onehot[count] = 1.0
    onehot[len(COUNT_WORDS) + color] = 1.0
    onehot[len(COUNT_WORDS) + len(COLORS) + shape] = 1.0
    reps = int(np.ceil(dim / onehot.size))
    tiled = np.tile(onehot, reps)[:dim]
    return (tiled + rng.normal(0.0, FEATURE_NOISE, size=dim)).astype(np.float32)


def generate_synthetic(n_dialogues: int, rounds_per_dialogue: int, seed: int,
                       feature_dim: int = 64) -> tuple[list[DialogueExample], list[ImageFeatures]]:
    """Deterministic closed-world visual dialogues with oracle grounding.

    Half of the images contain two objects that share a shape but differ
    in color and count; attribute questions about either of them cannot be
    answered from the text alone, only from the grounded object's features.
    """
    if n_dialogues < 1:
        raise DataError("need at least one dialogue")
    if rounds_per_dialogue < 1:
        raise DataError("need at least one round per dialogue")
    rng = np.random.default_rng(seed)
    pool = _candidate_pool()
    examples: list[DialogueExample] = []
    all_features: list[ImageFeatures] = []

    for image_id in range(n_dialogues):
        k = int(rng.integers(3, 7))
        shape_ids = list(rng.choice(len(SHAPES), size=k, replace=False))
        color_ids = [int(rng.integers(len(COLORS))) for _ in range(k)]
        count_ids = [int(rng.integers(len(COUNT_WORDS))) for _ in range(k)]
        if rng.random() < 0.5 and k >= 2:
            # duplicated shape with different color and count
            shape_ids[1] = shape_ids[0]
            while color_ids[1] == color_ids[0]:
                color_ids[1] = int(rng.integers(len(COLORS)))
            while count_ids[1] == count_ids[0]:
                count_ids[1] = int(rng.integers(len(COUNT_WORDS)))

        phrases = [
            f"{COUNT_WORDS[count_ids[i]]} {COLORS[color_ids[i]]} {SHAPES[shape_ids[i]]}"
            for i in range(k)
        ]
        caption = "a photo of " + " and ".join(phrases)
        matrix = np.stack([
            _object_features(color_ids[i], shape_ids[i], count_ids[i], feature_dim, rng)
            for i in range(k)
        ])
        all_features.append(ImageFeatures(image_id, matrix))

        rounds = []
        for number in range(1, rounds_per_dialogue + 1):
            if number % 4 == 0:
                question, answer, grounding = FALLBACK_QUESTION, FALLBACK_ANSWER, []
            else:
                obj = int(rng.integers(k))
                if rng.random() < 0.5:
                    question = f"what color is the {SHAPES[shape_ids[obj]]} ?"
                    answer = COLORS[color_ids[obj]]
                else:
                    question = f"how many {SHAPES[shape_ids[obj]]} are there ?"
                    answer = COUNT_WORDS[count_ids[obj]]
                grounding = [obj]
            distractors = [c for c in pool if c != answer]
            picked = list(rng.choice(len(distractors), size=N_CANDIDATES - 1, replace=False))
            candidates = [distractors[i] for i in picked]
            gt_index = int(rng.integers(N_CANDIDATES))
            candidates.insert(gt_index, answer)
            answer_words = set(answer.split())
            relevance = [
                1.0 if i == gt_index
                else (0.5 if answer_words & set(cand.split()) else 0.0)
                for i, cand in enumerate(candidates)
            ]
            rounds.append(DialogueRound(
                question=normalize_and_tokenize(question),
                answer=normalize_and_tokenize(answer),
                grounding=grounding,
                candidates=candidates,
                gt_index=gt_index,
                relevance=relevance,
            ))
        examples.append(DialogueExample(image_id, normalize_and_tokenize(caption), rounds))

    features_by_id = {f.image_id: f for f in all_features}
    attach_features(examples, features_by_id)
    return examples, all_features


def corpus_token_sequences(examples: Iterable[DialogueExample]) -> Iterable[list[str]]:
    """Caption, question and answer token streams for vocabulary building."""
    for ex in examples:
        yield ex.caption
        for rnd in ex.rounds:
            yield rnd.question
            yield rnd.answer
