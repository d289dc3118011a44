"""Visually grounded dialogue modelling on a self-contained tensor core.

The package builds everything from the ground up: a dense-tensor library
with reverse-mode differentiation, transformer blocks on top of it, an
object-feature grounding encoder, an incremental dialogue encoder that
carries a context state across rounds, and a decoder whose cross-attention
gates the textual and visual context sources before fusing them.  A
synthetic closed-world benchmark, a trainer, retrieval metrics and a CLI
round out the artifact.
"""

__version__ = "0.1.0"

from .data import (DialogueExample, DialogueRound, ImageFeatures, Vocabulary,
                   build_vocab, generate_synthetic, load_dataset, load_features,
                   normalize_and_tokenize, write_dataset, write_features)
from .errors import (ContractError, DataError, FormatError, NumericalError,
                     ShapeError)
from .evaluation import EvalReport, aggregate_ranks, evaluate, ndcg, rank_of_gt
from .gcad import GcadDecoder
from .grounding import GroundingEncoder, select_grounding
from .mite import ContextState, MiteEncoder
from .model import MitvgModel, ModelConfig, build_model
from .tensor import Tape, Tensor, backward, grad_check
from .train import Adam, TrainResult, lr_at, train

__all__ = [
    "Adam", "ContextState", "ContractError", "DataError", "DialogueExample",
    "DialogueRound", "EvalReport", "FormatError", "GcadDecoder",
    "GroundingEncoder", "ImageFeatures", "MitvgModel", "MiteEncoder",
    "ModelConfig", "NumericalError", "ShapeError", "Tape", "Tensor",
    "TrainResult", "Vocabulary", "aggregate_ranks", "backward", "build_model",
    "build_vocab", "evaluate", "generate_synthetic", "grad_check", "load_dataset",
    "load_features", "lr_at", "ndcg", "normalize_and_tokenize", "rank_of_gt",
    "select_grounding", "train", "write_dataset", "write_features",
]
