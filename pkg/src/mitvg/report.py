"""Figure rendering for training and evaluation runs.

Figures are written next to the machine-readable outputs so a run
directory is self-describing: training produces a loss-versus-step curve
and evaluation a histogram of true-answer ranks.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

from .evaluation import QuestionResult
from .train import TrainRecord


def save_loss_curve(records: Sequence[TrainRecord], path) -> Path:
    path = Path(path)
    steps = [r.step for r in records]
    losses = [r.loss for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_rank_histogram(details: Sequence[QuestionResult], path,
                        n_candidates: int = 100) -> Path:
    path = Path(path)
    ranks = [d.rank for d in details]
    fig, ax = plt.subplots(figsize=(7, 4))
    upper = max(n_candidates, max(ranks, default=1))
    ax.hist(ranks, bins=range(1, upper + 2), color="#4878cf", edgecolor="white")
    ax.set_xlabel("rank of true answer")
    ax.set_ylabel("questions")
    ax.set_title("retrieval rank distribution")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
