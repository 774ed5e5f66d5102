"""Desk-scale multimodal chain-of-thought toolkit.

Gated multi-hop cross-modal fusion, a two-stage rationale/answer
pipeline on a tiny differentiable tensor kernel, generation metrics,
and dataset curation/analysis tooling.
"""

from .config import RunConfig, load_config
from .dataset import TripletRecord, load_corpus, save_corpus
from .fusion import FusionParams, multi_hop
from .objectives import contrastive_loss, token_cross_entropy, total_loss
from .pipeline import (
    TwoStageModel,
    classify_case,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .tensor import Tensor
from .textmetrics import accuracy, bleu, cosine_similarity, rouge_l, support_rate

__version__ = "0.1.0"

__all__ = [
    "FusionParams",
    "RunConfig",
    "Tensor",
    "TripletRecord",
    "TwoStageModel",
    "__version__",
    "accuracy",
    "bleu",
    "classify_case",
    "contrastive_loss",
    "cosine_similarity",
    "load_checkpoint",
    "load_config",
    "load_corpus",
    "multi_hop",
    "rouge_l",
    "save_checkpoint",
    "save_corpus",
    "support_rate",
    "token_cross_entropy",
    "total_loss",
    "train",
]
