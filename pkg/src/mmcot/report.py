"""Evaluation report: per-record metric rows, aggregates, quadrant
counts, and per-question-type accuracy.

Predictions join the corpus on record id; each joined pair yields BLEU,
similarity, and LCS-overlap scores for the rationale and answer fields,
an exact-match flag for the answer, and a case-quadrant label.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .dataset import TripletRecord, question_type_tag
from .errors import DegenerateInputError, FileFormatError, UnknownIdError
from .pipeline import QUADRANT_NAMES, classify_case
from .textmetrics import (
    average_accuracy,
    bleu,
    normalize_text,
    rouge_l,
    text_similarity,
    tokenize,
)

METRIC_COLUMNS = (
    "bleu_rationale", "similarity_rationale", "rouge_l_rationale",
    "bleu_answer", "similarity_answer", "rouge_l_answer", "answer_exact",
)


@dataclass
class Prediction:
    id: str
    rationale: str
    answer: str


@dataclass
class EvalRow:
    id: str
    split: str
    question_type: str
    values: dict[str, float]
    quadrant: str
    flags: str = ""


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict[str, float]
    quadrant_counts: dict[str, int]
    accuracy: float
    per_type_accuracy: dict[str, float]
    avg_accuracy: float
    bleu_n: int

    @property
    def size(self) -> int:
        return len(self.rows)


def load_predictions(path) -> dict[str, Prediction]:
    preds: dict[str, Prediction] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in ("id", "pred_rationale", "pred_answer") if k not in raw]
            if missing:
                raise FileFormatError(
                    f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            preds[str(raw["id"])] = Prediction(id=str(raw["id"]),
                                               rationale=raw["pred_rationale"],
                                               answer=raw["pred_answer"])
    return preds


def save_predictions(preds: Sequence[Prediction], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in preds:
            fh.write(json.dumps({"id": p.id, "pred_rationale": p.rationale,
                                 "pred_answer": p.answer}, ensure_ascii=False) + "\n")


def build_report(records: Sequence[TripletRecord], preds: Mapping[str, Prediction],
                 threshold_rationale: float = 0.5, threshold_answer: float = 0.5,
                 bleu_n: int = 4, token_mode: str = "whitespace") -> EvalReport:
    if not records:
        raise DegenerateInputError("cannot evaluate an empty record list")
    missing = [r.id for r in records if r.id not in preds]
    if missing:
        raise UnknownIdError(f"predictions missing for id(s): {', '.join(missing[:5])}")

    rows: list[EvalRow] = []
    quadrants = {name: 0 for name in QUADRANT_NAMES}
    type_hits: dict[str, list[int]] = {}
    for rec in records:
        p = preds[rec.id]
        flags = []
        values: dict[str, float] = {}
        for fname, pred_text, gold_text in (("rationale", p.rationale, rec.rationale),
                                            ("answer", p.answer, rec.answer)):
            cand = tokenize(pred_text, mode=token_mode)
            ref = tokenize(gold_text, mode=token_mode)
            if not cand:
                flags.append(f"empty_{fname}")
            # effective order: short pairs are scored at the longest
            # n-gram order they can support
            eff_n = min(bleu_n, len(cand), len(ref))
            values[f"bleu_{fname}"] = bleu(cand, ref, max_n=eff_n) if eff_n else 0.0
            values[f"similarity_{fname}"] = max(0.0, text_similarity(cand, ref))
            values[f"rouge_l_{fname}"] = rouge_l(cand, ref)
        exact = normalize_text(p.answer) == normalize_text(rec.answer)
        values["answer_exact"] = 1.0 if exact else 0.0
        quad = classify_case(rec, p.rationale, p.answer,
                             threshold_rationale, threshold_answer)
        quadrants[quad.name] += 1
        qtype = rec.question_type or question_type_tag(rec.question)
        type_hits.setdefault(qtype, []).append(1 if exact else 0)
        rows.append(EvalRow(id=rec.id, split=rec.split, question_type=qtype,
                            values=values, quadrant=quad.name, flags="|".join(flags)))

    aggregates = {col: sum(r.values[col] for r in rows) / len(rows) for col in METRIC_COLUMNS}
    per_type = {t: sum(h) / len(h) for t, h in sorted(type_hits.items())}
    return EvalReport(
        rows=rows,
        aggregates=aggregates,
        quadrant_counts=quadrants,
        accuracy=aggregates["answer_exact"],
        per_type_accuracy=per_type,
        avg_accuracy=average_accuracy(list(per_type.values())),
        bleu_n=bleu_n,
    )


def write_report_csv(report: EvalReport, path) -> None:
    """Per-record rows followed by one AGGREGATE footer row."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "question_type", *METRIC_COLUMNS, "quadrant", "flags"])
        for r in report.rows:
            writer.writerow([r.id, r.split, r.question_type,
                             *[repr(r.values[c]) for c in METRIC_COLUMNS],
                             r.quadrant, r.flags])
        writer.writerow(["AGGREGATE", "", "",
                         *[repr(report.aggregates[c]) for c in METRIC_COLUMNS], "", ""])


def write_summary_csv(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerow(["records", report.size])
        writer.writerow(["accuracy", repr(report.accuracy)])
        writer.writerow(["avg_accuracy_over_question_types", repr(report.avg_accuracy)])
        for qtype, acc in report.per_type_accuracy.items():
            writer.writerow([f"accuracy[{qtype}] (heuristic types)", repr(acc)])
        for name in QUADRANT_NAMES:
            writer.writerow([f"quadrant[{name}]", report.quadrant_counts[name]])
