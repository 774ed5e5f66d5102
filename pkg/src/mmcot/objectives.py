"""Training objectives: sentence-level contrastive loss, token-level
cross-entropy, and their weighted combination.

The contrastive term pools image features and decoded text states into
unit-length sentence vectors, scores every image anchor against all
text vectors in the batch at temperature ``tau``, and penalizes the
negative log-probability of the matching pair (in-batch negatives).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, ParameterError, ShapeError
from .tensor import Tensor


@dataclass
class SentenceEmbedding:
    """Unit-length pooled representation of one sequence."""

    vector: Tensor  # 1-D, unit norm
    source: str = "text"  # "image" | "text"
    index: int = 0


@dataclass
class SimilarityMatrix:
    """Batch-by-batch similarity scores divided by the temperature."""

    scores: Tensor
    tau: float


@dataclass
class LossBreakdown:
    """Cross-entropy and contrastive pieces plus their combination.

    ``ce``, ``con`` and ``total`` stay scalar tensors so the combined
    objective can be backpropagated; use the ``*_value`` accessors for
    logging.
    """

    ce: Tensor
    con: Tensor
    lam: float
    total: Tensor

    @property
    def ce_value(self) -> float:
        return self.ce.item()

    @property
    def con_value(self) -> float:
        return self.con.item()

    @property
    def total_value(self) -> float:
        return self.total.item()


def sentence_embed(states: Tensor, source: str = "text", index: int = 0) -> SentenceEmbedding:
    """Mean-pool sequence states and L2-normalize to unit length."""
    if states.data.ndim != 2 or states.shape[0] == 0:
        raise ShapeError(f"sentence_embed needs a non-empty 2-D tensor, got {states.shape}")
    pooled = T.mean_rows(states)
    if float(np.linalg.norm(pooled.data)) == 0.0:
        raise DegenerateInputError("pooled sentence vector is zero; cannot normalize")
    return SentenceEmbedding(vector=T.l2_normalize(pooled), source=source, index=index)


def similarity_matrix(img: Sequence[SentenceEmbedding], txt: Sequence[SentenceEmbedding],
                      tau: float) -> SimilarityMatrix:
    """Pairwise dot products between pooled vectors, scaled by 1/tau."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if len(img) == 0 or len(img) != len(txt):
        raise ShapeError(f"batch sizes disagree: {len(img)} images vs {len(txt)} texts")
    rows = T.stack_rows([e.vector for e in img])
    cols = T.stack_rows([e.vector for e in txt])
    return SimilarityMatrix(scores=T.scale(T.matmul(rows, T.transpose(cols)), 1.0 / tau), tau=tau)


def contrastive_loss(s: SimilarityMatrix | Tensor, symmetric: bool = False) -> Tensor:
    """Mean over anchors of -log softmax(row)[diagonal].

    Each image is the anchor for its row; the matching-index text is the
    positive and the rest of the batch the negatives. ``symmetric``
    additionally anchors on texts (columns) and averages both
    directions.
    """
    scores = s.scores if isinstance(s, SimilarityMatrix) else s
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"contrastive_loss needs a square matrix, got {scores.shape}")

    def anchors(m: Tensor) -> Tensor:
        return T.mean_all(T.sub(T.row_logsumexp(m), T.take_diag(m)))

    loss = anchors(scores)
    if symmetric:
        loss = T.scale(T.add(loss, anchors(T.transpose(scores))), 0.5)
    return loss


def token_cross_entropy(logits: Tensor, targets: Sequence[int], pad_id: int | None = None) -> Tensor:
    """Mean of -log softmax(logits_t)[target_t] over non-pad positions."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    ids = list(targets)
    if len(ids) != logits.shape[0]:
        raise ShapeError(f"{len(ids)} targets for {logits.shape[0]} logit rows")
    vocab = logits.shape[1]
    keep = np.array([1.0 if (pad_id is None or t != pad_id) else 0.0 for t in ids])
    n_live = int(keep.sum())
    if n_live == 0:
        raise DegenerateInputError("all target positions are padding")
    for t, k in zip(ids, keep):
        if k and not (0 <= t < vocab):
            raise ContractError(f"target id {t} outside vocabulary of size {vocab}")
    safe = [t if k else 0 for t, k in zip(ids, keep)]  # pad rows are masked out below
    nll = T.sub(T.row_logsumexp(logits), T.gather_cols(logits, safe))
    masked = T.mul(nll, Tensor(keep))
    return T.scale(T.sum_all(masked), 1.0 / n_live)


def total_loss(ce: Tensor, con: Tensor, lam: float) -> LossBreakdown:
    """Combine the two objectives: total = ce + lam * con."""
    if lam < 0:
        raise ParameterError(f"loss weight must be non-negative, got {lam}")
    return LossBreakdown(ce=ce, con=con, lam=lam, total=T.add(ce, T.scale(con, lam)))
