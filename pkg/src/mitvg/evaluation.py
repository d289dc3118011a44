"""Retrieval metrics and candidate-list evaluation.

Every question ships with a fixed candidate list; the model assigns each
candidate a log-likelihood and the metrics summarize where the true
answer lands.  Rank ties break toward the earlier list index, so a
candidate placed before the true answer with an equal score pushes the
true answer's rank down by one.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DialogueExample, normalize_and_tokenize
from .errors import ContractError, DataError
from .model import MitvgModel

THREADS_ENV = "MITVG_THREADS"


def rank_of_gt(scores: Sequence[float], gt_index: int) -> int:
    """1-based rank of the true candidate under descending score order."""
    if not 0 <= gt_index < len(scores):
        raise ContractError(f"gt_index {gt_index} outside 0..{len(scores) - 1}")
    gt = scores[gt_index]
    rank = 1
    for i, s in enumerate(scores):
        if not math.isfinite(s):
            raise DataError(f"non-finite score at candidate {i}")
        if s > gt or (s == gt and i < gt_index):
            rank += 1
    return rank


def aggregate_ranks(ranks: Sequence[int]) -> dict:
    """MRR, recall at 1/5/10, and mean rank over a collection of ranks."""
    if not ranks:
        raise ContractError("no ranks to aggregate")
    n = len(ranks)
    return {
        "n": n,
        "mrr": sum(1.0 / r for r in ranks) / n,
        "r1": sum(1 for r in ranks if r <= 1) / n,
        "r5": sum(1 for r in ranks if r <= 5) / n,
        "r10": sum(1 for r in ranks if r <= 10) / n,
        "mean": sum(ranks) / n,
    }


def ndcg(scores: Sequence[float], relevance: Sequence[float]) -> float:
    """Graded-relevance gain at a cutoff equal to the relevant count.

    The cutoff is the number of candidates with positive relevance; an
    all-zero relevance vector scores 0.
    """
    if len(scores) != len(relevance):
        raise ContractError("scores and relevance lengths differ")
    for i, rel in enumerate(relevance):
        if not (math.isfinite(rel) and 0.0 <= rel <= 1.0):
            raise DataError(f"relevance {rel} at candidate {i} outside [0, 1]")
    k = sum(1 for rel in relevance if rel > 0)
    if k == 0:
        return 0.0
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    dcg = sum(relevance[order[p]] / math.log2(p + 2) for p in range(k))
    ideal = sorted(relevance, reverse=True)
    idcg = sum(ideal[p] / math.log2(p + 2) for p in range(k))
    return dcg / idcg


@dataclass
class QuestionResult:
    image_id: int
    round: int
    rank: int
    ndcg: Optional[float]
    gt_score: float


@dataclass
class EvalReport:
    summary: dict
    details: list[QuestionResult] = field(default_factory=list)


def _worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ContractError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if n < 1:
            raise ContractError(f"{THREADS_ENV} must be >= 1")
        return n
    return 1


def evaluate(model: MitvgModel, examples: list[DialogueExample],
             use_vg: Optional[bool] = None) -> EvalReport:
    """Score every candidate list in the corpus and aggregate the ranks.

    History context states are computed once per dialogue and shared
    across its rounds.  Candidate scoring fans out over a thread pool
    sized by the ``MITVG_THREADS`` environment variable (default 1).
    """
    workers = _worker_count()
    ranks: list[int] = []
    ndcgs: list[float] = []
    details: list[QuestionResult] = []

    def score_all(cands, c_t, v_g):
        token_ids = [model.vocab.encode(normalize_and_tokenize(c)) for c in cands]
        if workers == 1:
            return [model.score_candidate(ids, c_t, v_g) for ids in token_ids]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda ids: model.score_candidate(ids, c_t, v_g), token_ids))

    for ex in examples:
        cache: dict = {}
        for t in range(1, len(ex.rounds) + 1):
            rnd = ex.rounds[t - 1]
            if rnd.candidates is None or rnd.gt_index is None:
                raise DataError(f"image {ex.image_id} round {t}: no candidate list")
            c_t, v_g = model.encode_dialogue(ex, t, use_vg=use_vg, history_cache=cache)
            scores = score_all(rnd.candidates, c_t, v_g)
            rank = rank_of_gt(scores, rnd.gt_index)
            ranks.append(rank)
            q_ndcg = None
            if rnd.relevance is not None:
                q_ndcg = ndcg(scores, rnd.relevance)
                ndcgs.append(q_ndcg)
            details.append(QuestionResult(ex.image_id, t, rank, q_ndcg,
                                          scores[rnd.gt_index]))
    if not ranks:
        raise DataError("nothing to evaluate: empty example list")
    summary = aggregate_ranks(ranks)
    summary["ndcg"] = sum(ndcgs) / len(ndcgs) if ndcgs else None
    return EvalReport(summary=summary, details=details)
