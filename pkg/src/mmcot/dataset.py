"""Triplet corpus schema, JSONL loading/validation, split accounting,
and the length/question-type analyses.

A corpus is one JSON object per line. Splits are taken as given by the
manifest and never reassigned.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import FileFormatError, ParameterError

VALID_SPLITS = ("train", "val", "test")
VALID_SOURCES = ("caption", "vqa")
VALID_REVIEW = ("unreviewed", "accepted", "rejected")

QUESTION_TYPES = ("Caption", "True/False", "Numeric", "Color",
                  "Person", "Time", "Action", "Others")

_FIELD_ORDER = ("id", "question", "rationale", "answer", "image_ref",
                "split", "source", "question_type", "review_status")


@dataclass
class TripletRecord:
    """One dataset item: question, rationale, answer plus bookkeeping."""

    id: str
    question: str
    rationale: str
    answer: str
    image_ref: str
    split: str = "train"
    source: str = "vqa"
    question_type: str | None = None
    review_status: str = "accepted"

    def validate(self) -> list[str]:
        """Returns problem descriptions; empty means the record is valid."""
        problems = []
        for name in ("id", "question", "rationale", "answer"):
            value = getattr(self, name)
            if not isinstance(value, str):
                problems.append(f"field `{name}` must be a string")
        if self.split not in VALID_SPLITS:
            problems.append(f"field `split` must be one of {VALID_SPLITS}, got {self.split!r}")
        if self.source not in VALID_SOURCES:
            problems.append(f"field `source` must be one of {VALID_SOURCES}, got {self.source!r}")
        if self.review_status not in VALID_REVIEW:
            problems.append(f"field `review_status` must be one of {VALID_REVIEW}")
        if self.review_status == "accepted":
            for name in ("question", "rationale", "answer"):
                if isinstance(getattr(self, name), str) and not getattr(self, name).strip():
                    problems.append(f"accepted record has empty `{name}`")
        return problems

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps({k: d[k] for k in _FIELD_ORDER if k in d}, ensure_ascii=False)

    @classmethod
    def from_dict(cls, raw: dict) -> "TripletRecord":
        missing = [k for k in ("id", "question", "rationale", "answer") if k not in raw]
        if missing:
            raise FileFormatError("record missing field(s): " + ", ".join(f"`{m}`" for m in missing))
        unknown = [k for k in raw if k not in _FIELD_ORDER]
        if unknown:
            raise FileFormatError("record has unknown field(s): " + ", ".join(sorted(unknown)))
        return cls(
            id=str(raw["id"]),
            question=raw["question"],
            rationale=raw["rationale"],
            answer=raw["answer"],
            image_ref=raw.get("image_ref", ""),
            split=raw.get("split", "train"),
            source=raw.get("source", "vqa"),
            question_type=raw.get("question_type"),
            review_status=raw.get("review_status", "accepted"),
        )


@dataclass
class LineError:
    lineno: int
    message: str


@dataclass
class LoadResult:
    records: list[TripletRecord]
    errors: list[LineError] = field(default_factory=list)


def load_corpus(path, strict: bool = False) -> LoadResult:
    """Read a JSONL corpus; malformed lines are collected, not fatal,
    unless ``strict`` is set."""
    records: list[TripletRecord] = []
    errors: list[LineError] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                if not isinstance(raw, dict):
                    raise FileFormatError("line is not a JSON object")
                rec = TripletRecord.from_dict(raw)
                problems = rec.validate()
                if rec.id in seen_ids:
                    problems.append(f"duplicate record id {rec.id!r}")
                if problems:
                    raise FileFormatError("; ".join(problems))
            except (json.JSONDecodeError, FileFormatError) as exc:
                if strict:
                    raise FileFormatError(f"{path}:{lineno}: {exc}") from None
                errors.append(LineError(lineno=lineno, message=str(exc)))
                continue
            seen_ids.add(rec.id)
            records.append(rec)
    return LoadResult(records=records, errors=errors)


def save_corpus(records: Iterable[TripletRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


# --------------------------------------------------------------------------
# Split accounting and length analysis
# --------------------------------------------------------------------------

@dataclass
class Histogram:
    """Integer-width bins over character lengths, plus log counts for
    plotting (log1p so empty bins stay defined)."""

    edges: list[int]  # len(edges) == len(counts) + 1; bin i is [edges[i], edges[i+1])
    counts: list[int]
    log_counts: list[float]

    @classmethod
    def of_lengths(cls, lengths: Sequence[int], bins: int = 20) -> "Histogram":
        if bins < 1:
            raise ParameterError(f"need at least one bin, got {bins}")
        if not lengths:
            return cls(edges=[0], counts=[], log_counts=[])
        top = max(lengths) + 1
        width = max(1, math.ceil(top / bins))
        nbins = math.ceil(top / width)
        edges = [i * width for i in range(nbins + 1)]
        counts = [0] * nbins
        for n in lengths:
            counts[n // width] += 1
        return cls(edges=edges, counts=counts,
                   log_counts=[math.log1p(c) for c in counts])


@dataclass
class SplitStats:
    counts: dict[str, int]
    total: int
    histograms: dict[str, Histogram]  # question / rationale / answer


def split_stats(records: Sequence[TripletRecord], bins: int = 20) -> SplitStats:
    counts = {split: 0 for split in VALID_SPLITS}
    for rec in records:
        counts[rec.split] += 1
    histograms = {
        name: Histogram.of_lengths([len(getattr(r, name)) for r in records], bins=bins)
        for name in ("question", "rationale", "answer")
    }
    return SplitStats(counts=counts, total=len(records), histograms=histograms)


# --------------------------------------------------------------------------
# Question-type taxonomy (keyword heuristic standing in for the
# volunteer-assigned labels; reports mark it as heuristic)
# --------------------------------------------------------------------------

_TF_LEADS = {"is", "are", "was", "were", "do", "does", "did", "can", "could",
             "will", "would", "has", "have", "had", "am", "should", "shall"}
_PERSON_WORDS = {"person", "people", "man", "woman", "men", "women", "boy",
                 "girl", "child", "children", "player", "lady", "guy"}
_TIME_WORDS = {"time", "year", "month", "day", "hour", "minute", "season",
               "morning", "evening", "night", "date"}
_ACTION_WORDS = {"doing", "action", "activity", "playing", "happening"}


def question_type_tag(question: str) -> str:
    """Deterministic rule-table category for a question.

    Precedence: Caption, True/False (leading auxiliary), Numeric,
    Color, Time, Action, Person, then Others as the total fallback.
    """
    words = question.lower().split()
    if not words:
        return "Others"
    text = " ".join(words)
    if "caption" in text or "captioned" in text or "title" in text:
        return "Caption"
    if words[0] in _TF_LEADS:
        return "True/False"
    if "how many" in text or "how much" in text or any(w.isdigit() for w in words):
        return "Numeric"
    if "color" in text or "colour" in text:
        return "Color"
    if words[0] == "when" or any(w in _TIME_WORDS for w in words):
        return "Time"
    if any(w in _ACTION_WORDS for w in words):
        return "Action"
    if words[0] in ("who", "whose", "whom") or any(w in _PERSON_WORDS for w in words):
        return "Person"
    return "Others"


def question_type_counts(records: Sequence[TripletRecord]) -> dict[str, int]:
    counts = {name: 0 for name in QUESTION_TYPES}
    for rec in records:
        tag = rec.question_type or question_type_tag(rec.question)
        counts[tag if tag in counts else "Others"] += 1
    return counts
