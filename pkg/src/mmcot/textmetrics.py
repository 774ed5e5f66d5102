"""Generation-quality metrics and the support-rate analysis.

Four headline metrics: exact-match accuracy (with its per-aspect
average), BLEU with a brevity penalty, cosine similarity between text
embeddings, and an LCS-based variant of ROUGE-L that divides the LCS
length by the *longer* of the two sequences (this is deliberately not
the usual F-measure formulation).

The support rate asks whether question + rationale entail the answer;
the entailment judge is pluggable, and a deterministic token-containment
rule ships as the offline reference scorer.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ShapeError

_WS = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    """Lowercase, strip, and collapse internal whitespace."""
    return _WS.sub(" ", s.strip().lower())


def tokenize(s: str, mode: str = "whitespace") -> list[str]:
    """Split normalized text into metric units.

    ``whitespace`` is the default unit for BLEU/ROUGE; ``char`` mode is
    available for character-level scoring.
    """
    norm = normalize_text(s)
    if mode == "whitespace":
        return norm.split()
    if mode == "char":
        return list(norm)
    raise ParameterError(f"unknown token mode {mode!r}")


# --------------------------------------------------------------------------
# Accuracy
# --------------------------------------------------------------------------

def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    """Exact-match fraction after text normalization."""
    if len(preds) != len(golds):
        raise ShapeError(f"{len(preds)} predictions vs {len(golds)} references")
    if not preds:
        raise DegenerateInputError("accuracy of an empty list")
    hits = sum(1 for p, g in zip(preds, golds) if normalize_text(p) == normalize_text(g))
    return hits / len(preds)


def average_accuracy(per_aspect: Sequence[float]) -> float:
    """Arithmetic mean of per-aspect accuracies."""
    values = list(per_aspect)
    if not values:
        raise DegenerateInputError("average_accuracy of an empty list")
    return sum(values) / len(values)


# --------------------------------------------------------------------------
# BLEU
# --------------------------------------------------------------------------

def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def brevity_penalty(candidate_len: int, reference_len: int) -> float:
    """1 when the candidate is longer than the reference, else
    exp(1 - r/c)."""
    if candidate_len == 0:
        raise DegenerateInputError("brevity penalty undefined for an empty candidate")
    if candidate_len > reference_len:
        return 1.0
    return math.exp(1.0 - reference_len / candidate_len)


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4,
         weights: Sequence[float] | None = None, smooth: bool = False) -> float:
    """n-gram precision score with clipping and a brevity penalty.

    Any order with zero precision collapses the geometric mean to 0
    unless add-one ``smooth``ing is requested. An empty candidate scores
    0 (the penalty's 1/c is undefined there).
    """
    if max_n < 1:
        raise ParameterError(f"max_n must be >= 1, got {max_n}")
    if weights is None:
        weights = [1.0 / max_n] * max_n
    weights = [float(w) for w in weights]
    if len(weights) != max_n:
        raise ParameterError(f"need {max_n} weights, got {len(weights)}")
    if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ParameterError("weights must be non-negative and sum to 1")

    cand = list(candidate)
    ref = list(reference)
    if not cand:
        return 0.0

    log_sum = 0.0
    for n, w in zip(range(1, max_n + 1), weights):
        total = max(len(cand) - n + 1, 0)
        if total == 0:
            return 0.0
        counts = _ngram_counts(cand, n)
        ref_counts = _ngram_counts(ref, n)
        matched = sum(min(c, ref_counts.get(g, 0)) for g, c in counts.items())
        if smooth:
            p = (matched + 1) / (total + 1)
        else:
            if matched == 0:
                return 0.0
            p = matched / total
        log_sum += w * math.log(p)
    return brevity_penalty(len(cand), len(ref)) * math.exp(log_sum)


# --------------------------------------------------------------------------
# Similarity
# --------------------------------------------------------------------------

def cosine_similarity(c_vec, r_vec) -> float:
    """dot(c, r) / (|c| |r|), in [-1, 1]."""
    c = np.asarray(c_vec, dtype=np.float64)
    r = np.asarray(r_vec, dtype=np.float64)
    if c.shape != r.shape or c.ndim != 1:
        raise ShapeError(f"cosine needs equal-length vectors, got {c.shape} and {r.shape}")
    nc, nr = np.linalg.norm(c), np.linalg.norm(r)
    if nc == 0.0 or nr == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    # clip the one-ulp float spill so self-similarity is exactly 1
    return float(min(1.0, max(-1.0, c @ r / (nc * nr))))


class TextEmbedder(Protocol):
    """Embeds a candidate/reference pair into comparable vectors."""

    def embed_pair(self, candidate: Sequence[str], reference: Sequence[str]
                   ) -> tuple[np.ndarray, np.ndarray]: ...


class BagOfTokensEmbedder:
    """Count vector over the pair's token union; a deterministic
    stand-in for a learned sentence embedder."""

    def embed_pair(self, candidate: Sequence[str], reference: Sequence[str]
                   ) -> tuple[np.ndarray, np.ndarray]:
        vocab = sorted(set(candidate) | set(reference))
        pos = {tok: i for i, tok in enumerate(vocab)}
        c = np.zeros(len(vocab))
        r = np.zeros(len(vocab))
        for tok in candidate:
            c[pos[tok]] += 1.0
        for tok in reference:
            r[pos[tok]] += 1.0
        return c, r


def text_similarity(candidate: Sequence[str], reference: Sequence[str],
                    embedder: TextEmbedder | None = None) -> float:
    """Cosine similarity between embedded token sequences; 0.0 when
    either side is empty."""
    if not candidate or not reference:
        return 0.0
    c, r = (embedder or BagOfTokensEmbedder()).embed_pair(candidate, reference)
    return cosine_similarity(c, r)


# --------------------------------------------------------------------------
# ROUGE-L (LCS over the longer length)
# --------------------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length, iterative DP over two rows."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS(c, r) / max(len(c), len(r)); 0.0 when either side is empty."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return 0.0
    return lcs_length(cand, ref) / max(len(cand), len(ref))


# --------------------------------------------------------------------------
# Support rate
# --------------------------------------------------------------------------

class EntailmentScorer(Protocol):
    """Judges whether a premise supports a hypothesis. Must be
    deterministic for fixed inputs."""

    def score(self, premise: str, hypothesis: str) -> bool: ...


class TokenContainmentScorer:
    """Supportive iff every hypothesis token occurs in the premise.

    A crude but fully offline reference judge; a learned entailment
    model can be injected instead.
    """

    def score(self, premise: str, hypothesis: str) -> bool:
        premise_tokens = set(tokenize(premise))
        hypo_tokens = tokenize(hypothesis)
        return all(tok in premise_tokens for tok in hypo_tokens)


def support_rate(records: Iterable, scorer: EntailmentScorer) -> dict[str, float]:
    """Per-split fraction of triplets whose question+rationale support
    the answer. Records need question/rationale/answer/split fields."""
    supportive: dict[str, int] = {}
    totals: dict[str, int] = {}
    for rec in records:
        premise = f"{rec.question} {rec.rationale}"
        totals[rec.split] = totals.get(rec.split, 0) + 1
        if scorer.score(premise, rec.answer):
            supportive[rec.split] = supportive.get(rec.split, 0) + 1
    if not totals:
        raise DegenerateInputError("support_rate over an empty corpus")
    return {split: supportive.get(split, 0) / n for split, n in sorted(totals.items())}


# --------------------------------------------------------------------------
# Aggregated per-record scores
# --------------------------------------------------------------------------

@dataclass
class MetricScore:
    """Per-record values plus their arithmetic-mean aggregate.

    Values are clamped below at 0 (reporting convention for the rare
    negative cosine).
    """

    name: str
    per_record: list[float] = field(default_factory=list)

    def add(self, value: float) -> None:
        self.per_record.append(max(0.0, float(value)))

    @property
    def aggregate(self) -> float:
        if not self.per_record:
            raise DegenerateInputError(f"metric {self.name} has no records")
        return sum(self.per_record) / len(self.per_record)
