"""Concept-wise attention concept bottleneck models on frozen visual tokens."""

__version__ = "0.1.0"

from .coat import AttentionTrace, CoatParams, attend, init_params  # noqa: E402
from .cco import LossConfig, bce_loss, cco_loss, cls_loss, total_loss  # noqa: E402
from .scoring import Head, PosNegSplit, concept_scores, intervene, predict, top_k  # noqa: E402
from .synth import SynthConfig, generate  # noqa: E402
from .trainer import Checkpoint, TrainConfig, evaluate, train  # noqa: E402

__all__ = [
    "AttentionTrace", "CoatParams", "attend", "init_params",
    "LossConfig", "bce_loss", "cco_loss", "cls_loss", "total_loss",
    "Head", "PosNegSplit", "concept_scores", "intervene", "predict", "top_k",
    "SynthConfig", "generate",
    "Checkpoint", "TrainConfig", "evaluate", "train",
]
