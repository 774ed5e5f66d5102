"""Command-line entry point.

One subcommand per workflow: train, eval, analyze, curate,
support-rate, case-study. Data goes to files under --out; progress and
diagnostics go to stderr; exit status 0 iff no errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import load_config
from .curation import (
    EchoGenerator,
    apply_review,
    collect_rationales,
    load_decisions,
    load_sources,
)
from .dataset import (
    load_corpus,
    question_type_counts,
    save_corpus,
    split_stats,
)
from .errors import MMCoTError
from .pipeline import FeatureStore, load_checkpoint, save_checkpoint, train
from .report import (
    Prediction,
    build_report,
    load_predictions,
    save_predictions,
    write_report_csv,
    write_summary_csv,
)
from .textmetrics import TokenContainmentScorer, support_rate


def _eprint(*args) -> None:
    print(*args, file=sys.stderr)


def _load_records(args, require_nonempty: bool = True):
    result = load_corpus(args.corpus, strict=args.strict)
    for err in result.errors:
        _eprint(f"{args.corpus}:{err.lineno}: skipped: {err.message}")
    if require_nonempty and not result.records:
        raise MMCoTError(f"corpus {args.corpus} contains no valid records")
    return result.records


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, overrides={"seed": args.seed})
    records = _load_records(args)
    out = _out_dir(args)
    result = train(records, cfg, features_root=Path(args.corpus).parent)
    ckpt = out / "checkpoint.ckpt"
    save_checkpoint(result.model, ckpt)
    for stage_name, rows in result.logs.items():
        with open(out / f"log_{stage_name}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "ce", "con", "total"])
            for r in rows:
                writer.writerow([r.step, repr(r.ce), repr(r.con), repr(r.total)])
        _eprint(f"{stage_name}: {result.steps[stage_name]} steps"
                + (" (early stop)" if result.stopped_early[stage_name] else ""))
    _eprint(f"checkpoint written to {ckpt}")
    return 0


def _evaluation_report(args):
    """Shared by eval and case-study: load the split, obtain predictions
    (file, oracle, or checkpoint decode), score them."""
    records = [r for r in _load_records(args) if r.split == args.split]
    if not records:
        raise MMCoTError(f"split {args.split!r} is empty")
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.predictions:
        preds = load_predictions(args.predictions)
    elif args.oracle:
        preds = {r.id: Prediction(id=r.id, rationale=r.rationale, answer=r.answer)
                 for r in records}
    elif model is not None:
        features = FeatureStore(root=Path(args.corpus).parent,
                                expected_width=model.config.d)
        preds = {}
        for rec in records:
            rat, ans = model.run_record(rec, features.get(rec.image_ref))
            preds[rec.id] = Prediction(id=rec.id, rationale=rat.text, answer=ans.text)
    else:
        raise MMCoTError("need --checkpoint, --predictions, or --oracle")
    if args.config:
        cfg = load_config(args.config)
    elif model is not None:
        cfg = model.config
    else:
        cfg = load_config(None)
    report = build_report(records, preds, cfg.threshold_rationale,
                          cfg.threshold_answer, bleu_n=args.bleu_n,
                          token_mode=args.token_mode)
    return report, preds


def cmd_eval(args) -> int:
    out = _out_dir(args)
    report, preds = _evaluation_report(args)
    if not args.predictions and not args.oracle:
        save_predictions(sorted(preds.values(), key=lambda p: p.id),
                         out / "predictions.jsonl")
    write_report_csv(report, out / "report.csv")
    write_summary_csv(report, out / "summary.csv")
    _eprint(f"evaluated {report.size} records from split {args.split!r}")
    return 0


def cmd_case_study(args) -> int:
    out = _out_dir(args)
    report, _ = _evaluation_report(args)
    with open(out / "cases.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "split", "rationale_valid", "answer_correct", "quadrant"])
        for row in report.rows:
            valid, correct = row.quadrant.split("/")
            writer.writerow([row.id, row.split,
                             int(valid == "valid_rationale"),
                             int(correct == "correct_answer"), row.quadrant])
    with open(out / "case_counts.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quadrant", "count"])
        for name, count in report.quadrant_counts.items():
            writer.writerow([name, count])
    _eprint(f"classified {report.size} records into quadrants")
    return 0


def cmd_analyze(args) -> int:
    records = _load_records(args, require_nonempty=False)
    out = _out_dir(args)
    stats = split_stats(records, bins=args.bins)
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "count"])
        for split, count in stats.counts.items():
            writer.writerow([split, count])
        writer.writerow(["total", stats.total])
    for name, hist in stats.histograms.items():
        with open(out / f"lengths_{name}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count", "log1p_count"])
            for i, count in enumerate(hist.counts):
                writer.writerow([hist.edges[i], hist.edges[i + 1], count,
                                 repr(hist.log_counts[i])])
    qcounts = question_type_counts(records)
    with open(out / "question_types.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["question_type", "count", "labeling"])
        for name, count in qcounts.items():
            writer.writerow([name, count, "heuristic"])
    _plot_analyze(out, stats, qcounts)
    _eprint(f"analyzed {stats.total} records; outputs in {out}")
    return 0


def _plot_analyze(out: Path, stats, qcounts) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, hist in stats.histograms.items():
        if not hist.counts:
            continue
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
        centers = [(hist.edges[i] + hist.edges[i + 1]) / 2 for i in range(len(hist.counts))]
        width = hist.edges[1] - hist.edges[0]
        axes[0].bar(centers, hist.counts, width=width * 0.9)
        axes[0].set_title(f"{name} length (chars)")
        axes[1].bar(centers, hist.log_counts, width=width * 0.9, color="darkorange")
        axes[1].set_title(f"{name} length, log1p count")
        fig.tight_layout()
        fig.savefig(out / f"lengths_{name}.png", dpi=120)
        plt.close(fig)
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(list(qcounts.keys()), list(qcounts.values()))
    ax.set_title("question types (heuristic)")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out / "question_types.png", dpi=120)
    plt.close(fig)


def cmd_curate(args) -> int:
    if args.decisions:
        result = load_corpus(args.candidates, strict=args.strict)
        for err in result.errors:
            _eprint(f"{args.candidates}:{err.lineno}: skipped: {err.message}")
        review = apply_review(result.records, load_decisions(args.decisions))
        save_corpus(review.accepted, args.out)
        _eprint(f"review: {len(review.accepted)} accepted of {len(review.records)}")
        return 0
    if not (args.source and args.kind and args.journal):
        raise MMCoTError("collection needs --source, --kind, and --journal "
                         "(or --decisions with --candidates for review)")
    sources = load_sources(args.source, args.kind)
    result = collect_rationales(
        sources, EchoGenerator(), journal_path=args.journal,
        concurrency=args.concurrency, max_retries=args.max_retries,
        failure_log_path=args.failures)
    save_corpus(result.records, args.out)
    _eprint(f"collected {len(result.records)} candidates "
            f"({result.skipped} already journaled, {len(result.failures)} failures)")
    return 0 if not result.failures else 1


def cmd_support_rate(args) -> int:
    records = _load_records(args)
    rates = support_rate(records, TokenContainmentScorer())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "support_rate"])
        for split, rate in rates.items():
            writer.writerow([split, repr(rate)])
    _eprint(f"support rates written to {out}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmcot",
        description="Multimodal chain-of-thought toolkit: train/evaluate the "
                    "two-stage pipeline, analyze corpora, curate rationales.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, out=True):
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus JSONL path")
        if out:
            p.add_argument("--out", required=True, help="output directory or file")
        p.add_argument("--strict", action="store_true",
                       help="treat malformed corpus lines as fatal")

    p = sub.add_parser("train", help="train both stages and write a checkpoint")
    common(p)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=cmd_train)

    for name, fn in (("eval", cmd_eval), ("case-study", cmd_case_study)):
        p = sub.add_parser(name, help=f"run {name} over one corpus split")
        common(p)
        p.add_argument("--checkpoint", help="checkpoint file to decode with")
        p.add_argument("--predictions", help="pre-computed predictions JSONL")
        p.add_argument("--oracle", action="store_true",
                       help="score gold against itself (sanity mode)")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--config", help="config file for thresholds")
        p.add_argument("--bleu-n", type=int, default=4, dest="bleu_n")
        p.add_argument("--token-mode", choices=("whitespace", "char"),
                       default="whitespace", dest="token_mode",
                       help="metric token unit")
        p.set_defaults(fn=fn)

    p = sub.add_parser("analyze", help="split counts, length histograms, question types")
    common(p)
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("curate", help="collect candidate rationales or apply review")
    p.add_argument("--source", help="source JSONL (collection mode)")
    p.add_argument("--kind", choices=("caption", "vqa"), help="source flavor")
    p.add_argument("--journal", help="progress journal path (collection mode)")
    p.add_argument("--failures", help="failure log CSV (collection mode)")
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--max-retries", type=int, default=2, dest="max_retries")
    p.add_argument("--candidates", help="candidate corpus JSONL (review mode)")
    p.add_argument("--decisions", help="review decisions CSV (review mode)")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(fn=cmd_curate)

    p = sub.add_parser("support-rate", help="per-split support rate with the "
                                            "token-containment scorer")
    common(p)
    p.set_defaults(fn=cmd_support_rate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MMCoTError as exc:
        _eprint(f"error: {exc}")
        return 1
    except OSError as exc:
        _eprint(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
