"""Rationale-elicitation pipeline: prompt rendering, a pluggable
generator client, resumable collection, and review bookkeeping.

The generator backend is external; anything with a
``generate(prompt, image_ref, **params) -> str`` method plugs in. A
deterministic echo stub ships so the whole pipeline runs offline.
Collection appends finished ids to a journal, so an interrupted job
resumes without repeating client calls; failed records are *not*
journaled and are retried on the next run.
"""

from __future__ import annotations

import csv
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

from .dataset import TripletRecord
from .errors import (
    ContractError,
    FileFormatError,
    JournalCorruptError,
    ParameterError,
    UnknownIdError,
)


@dataclass
class PromptTemplate:
    """Literal template with `[Name]` placeholders."""

    kind: str  # caption | vqa
    text: str
    placeholders: tuple[str, ...]

    def __post_init__(self):
        expected = {"caption": 1, "vqa": 2}.get(self.kind)
        if expected is None:
            raise ParameterError(f"unknown template kind {self.kind!r}")
        counts = [self.text.count(f"[{p}]") for p in self.placeholders]
        if len(self.placeholders) != expected or any(c != 1 for c in counts):
            raise ParameterError(
                f"{self.kind} template must contain exactly one of each placeholder")

    def render(self, **values: str) -> str:
        out = self.text
        for name in self.placeholders:
            if name not in values or not values[name]:
                raise ContractError(f"template field {name!r} is missing or empty")
            out = out.replace(f"[{name}]", values[name])
        return out


CAPTION_PROMPT = PromptTemplate(
    kind="caption",
    text=("The caption of this picture reads: [Caption]. Based on the content of "
          "the picture, use thinking logic to explain why this picture is "
          "captioned as such."),
    placeholders=("Caption",),
)

VQA_PROMPT = PromptTemplate(
    kind="vqa",
    text=("I have a question about this picture: [Question]. If you have "
          "answered, and your ANSWER is: [Answer]. Then please, based on the "
          "content of the picture, the question and answer, use thinking logic "
          "to explain why it is this answer."),
    placeholders=("Question", "Answer"),
)

# Caption sources carry no question of their own; candidate triplets get
# this fixed one and the caption becomes the answer.
CAPTION_QUESTION = "What is the caption of this picture?"


def render_caption_prompt(caption: str) -> str:
    return CAPTION_PROMPT.render(Caption=caption)


def render_vqa_prompt(question: str, answer: str) -> str:
    return VQA_PROMPT.render(Question=question, Answer=answer)


# --------------------------------------------------------------------------
# Sources and clients
# --------------------------------------------------------------------------

@dataclass
class SourceRecord:
    """One pre-curation input row.

    Caption sources fill ``caption``; vqa sources fill ``question`` and
    ``answer``. ``split`` defaults to train for candidate corpora.
    """

    id: str
    image_ref: str
    kind: str
    caption: str = ""
    question: str = ""
    answer: str = ""
    split: str = "train"


def load_sources(path, kind: str) -> list[SourceRecord]:
    if kind not in ("caption", "vqa"):
        raise ParameterError(f"source kind must be caption or vqa, got {kind!r}")
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from None
            needed = ("id", "caption", "image_ref") if kind == "caption" else \
                     ("id", "question", "answer", "image_ref")
            missing = [k for k in needed if k not in raw]
            if missing:
                raise FileFormatError(
                    f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            out.append(SourceRecord(
                id=str(raw["id"]), image_ref=raw["image_ref"], kind=kind,
                caption=raw.get("caption", ""), question=raw.get("question", ""),
                answer=raw.get("answer", ""), split=raw.get("split", "train")))
    return out


class GeneratorClient(Protocol):
    """External rationale generator. Generation parameters are passed
    through opaquely; implementations own their own timeouts."""

    def generate(self, prompt: str, image_ref: str, **params) -> str: ...


class EchoGenerator:
    """Offline stub: the rationale is the prompt itself."""

    def generate(self, prompt: str, image_ref: str, **params) -> str:
        return prompt


def build_prompt(src: SourceRecord) -> str:
    if src.kind == "caption":
        return render_caption_prompt(src.caption)
    return render_vqa_prompt(src.question, src.answer)


def candidate_from(src: SourceRecord, rationale: str) -> TripletRecord:
    if src.kind == "caption":
        question, answer = CAPTION_QUESTION, src.caption
    else:
        question, answer = src.question, src.answer
    return TripletRecord(
        id=src.id, question=question, rationale=rationale, answer=answer,
        image_ref=src.image_ref, split=src.split, source=src.kind,
        review_status="unreviewed")


# --------------------------------------------------------------------------
# Journaled collection
# --------------------------------------------------------------------------

_JOURNAL_PREFIX = "done\t"


def read_journal(path) -> set[str]:
    p = Path(path)
    if not p.exists():
        return set()
    done = set()
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.startswith(_JOURNAL_PREFIX):
            raise JournalCorruptError(f"{path}:{lineno}: unrecognized journal line {line!r}")
        done.add(line[len(_JOURNAL_PREFIX):])
    return done


@dataclass
class CollectionFailure:
    id: str
    reason: str


@dataclass
class CollectionResult:
    records: list[TripletRecord]
    failures: list[CollectionFailure] = field(default_factory=list)
    skipped: int = 0  # already journaled


def collect_rationales(sources: Sequence[SourceRecord], client: GeneratorClient,
                       journal_path, concurrency: int = 4, max_retries: int = 2,
                       failure_log_path=None, gen_params: dict | None = None
                       ) -> CollectionResult:
    """Generate one candidate triplet per un-journaled source record.

    Client calls run on a bounded pool (``concurrency`` workers).
    Successes append to the journal immediately; failures are collected
    with their reason and optionally logged to CSV, never silently
    dropped.
    """
    if concurrency < 1:
        raise ParameterError("concurrency must be >= 1")
    if max_retries < 1:
        raise ParameterError("max_retries must be >= 1")
    ids = [s.id for s in sources]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ContractError(f"duplicate source id(s): {', '.join(dupes[:5])}")
    done = read_journal(journal_path)
    pending = [s for s in sources if s.id not in done]
    skipped = len(sources) - len(pending)

    journal_lock = threading.Lock()
    results: dict[str, TripletRecord] = {}
    failures: list[CollectionFailure] = []

    with open(journal_path, "a", encoding="utf-8", newline="\n") as journal:

        def work(src: SourceRecord):
            prompt = build_prompt(src)
            last = "no attempts made"
            for _ in range(max_retries):
                try:
                    text = client.generate(prompt, src.image_ref, **(gen_params or {}))
                except Exception as exc:  # client failures become records, not crashes
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                with journal_lock:  # success is durable before the result is returned
                    journal.write(_JOURNAL_PREFIX + src.id + "\n")
                    journal.flush()
                return src, candidate_from(src, text), None
            return src, None, last

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            for src, record, reason in pool.map(work, pending):
                if record is not None:
                    results[src.id] = record
                else:
                    failures.append(CollectionFailure(id=src.id, reason=reason))

    if failure_log_path is not None and failures:
        with open(failure_log_path, "a", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            for f in failures:
                writer.writerow([f.id, f.reason])

    ordered = [results[s.id] for s in pending if s.id in results]
    return CollectionResult(records=ordered, failures=failures, skipped=skipped)


# --------------------------------------------------------------------------
# Review
# --------------------------------------------------------------------------

@dataclass
class ReviewResult:
    records: list[TripletRecord]  # all records, statuses applied
    accepted: list[TripletRecord]


def load_decisions(path) -> dict[str, str]:
    decisions: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (lineno == 1 and [c.strip().lower() for c in row[:2]] == ["id", "decision"]):
                continue
            if len(row) < 2 or row[1].strip() not in ("accept", "reject"):
                raise FileFormatError(
                    f"{path}:{lineno}: expected `id,accept|reject`, got {row!r}")
            decisions[row[0].strip()] = row[1].strip()
    return decisions


def apply_review(records: Sequence[TripletRecord], decisions: dict[str, str]) -> ReviewResult:
    """Mark records accepted/rejected; unknown decision ids are an
    error, undecided records keep their current status."""
    by_id = {r.id: r for r in records}
    unknown = sorted(set(decisions) - set(by_id))
    if unknown:
        raise UnknownIdError(f"decisions reference unknown id(s): {', '.join(unknown)}")
    for rec_id, verdict in decisions.items():
        by_id[rec_id].review_status = "accepted" if verdict == "accept" else "rejected"
    out = list(records)
    return ReviewResult(records=out, accepted=[r for r in out if r.review_status == "accepted"])
