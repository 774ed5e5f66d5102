"""Two-stage execution: rationale generation, then answer inference.

Both stages run the same architecture with different inputs: stage 1
maps question + image features to a rationale; stage 2 consumes the
question, a separator, and the rationale (gold during training,
generated at inference) together with the same image features, and
produces the answer. Stages train as separate parameter sets by
default; a config flag shares one set across both.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_snapshot, config_snapshot_lines
from .errors import (
    ContractError,
    FileFormatError,
    NonFiniteError,
    ShapeError,
    TrainingDivergedError,
)
from .model import ToyModel
from .objectives import (
    LossBreakdown,
    contrastive_loss,
    sentence_embed,
    similarity_matrix,
    token_cross_entropy,
    total_loss,
)
from .dataset import TripletRecord
from .tensor import Tensor
from .textmetrics import normalize_text, rouge_l, tokenize
from .vocab import BOS_ID, EOS_ID, PAD_ID, SEP_ID, Vocab

STAGE_RATIONALE = "rationale"
STAGE_ANSWER = "answer"

_CHECKPOINT_MAGIC = "mmcot-checkpoint v1"


# --------------------------------------------------------------------------
# Inputs, decoding
# --------------------------------------------------------------------------

@dataclass
class StageInput:
    """Token ids and frozen image features entering one stage."""

    tokens: list[int]
    h_img: Tensor
    stage: str

    @classmethod
    def build(cls, question_tokens: Sequence[int],
              rationale_tokens: Sequence[int] | None,
              h_img: Tensor, stage: str) -> "StageInput":
        return cls(tokens=build_stage_tokens(question_tokens, rationale_tokens, stage),
                   h_img=h_img, stage=stage)


@dataclass
class DecodeConfig:
    max_len: int = 32


@dataclass
class Generation:
    tokens: list[int]
    text: str
    truncated: bool = False


def build_stage_tokens(question_tokens: Sequence[int],
                       rationale_tokens: Sequence[int] | None,
                       stage: str) -> list[int]:
    """Stage-1 input is the question; stage-2 appends a separator and
    the rationale tokens (possibly empty)."""
    if stage == STAGE_RATIONALE:
        return list(question_tokens)
    if stage == STAGE_ANSWER:
        return list(question_tokens) + [SEP_ID] + list(rationale_tokens or [])
    raise ContractError(f"unknown stage {stage!r}")


def load_image_features(path, expected_width: int | None = None) -> Tensor:
    """Read a feature file; the result never receives gradients."""
    feats = T.load_tensor(path)
    if feats.data.ndim != 2:
        raise FileFormatError(f"{path}: image features must be 2-D, got {feats.shape}")
    if expected_width is not None and feats.shape[1] != expected_width:
        raise ShapeError(
            f"{path}: feature width {feats.shape[1]} != model width {expected_width}")
    feats.requires_grad = False
    return feats


def greedy_decode(model: ToyModel, stage_input: StageInput,
                  decode: DecodeConfig) -> Generation:
    """Deterministic argmax decoding up to the length cap or end token."""
    cap = min(decode.max_len, model.max_positions - 1)
    out: list[int] = []
    with T.no_grad():
        states = model.encode_text(stage_input.tokens)
        fused, _ = model.fuse(states, stage_input.h_img)
        prefix = [BOS_ID]
        for _ in range(cap):
            dec = model.decode_states(fused, prefix)
            logits = model.logits(dec)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == EOS_ID:
                return Generation(tokens=out, text=model.vocab.decode(out), truncated=False)
            out.append(next_id)
            prefix.append(next_id)
    return Generation(tokens=out, text=model.vocab.decode(out), truncated=True)


def stage1_generate_rationale(question_tokens: Sequence[int], h_img: Tensor,
                              model: ToyModel, decode: DecodeConfig) -> Generation:
    return greedy_decode(
        model, StageInput.build(question_tokens, None, h_img, STAGE_RATIONALE), decode)


def stage2_infer_answer(question_tokens: Sequence[int], rationale_tokens: Sequence[int],
                        h_img: Tensor, model: ToyModel, decode: DecodeConfig) -> Generation:
    return greedy_decode(
        model, StageInput.build(question_tokens, rationale_tokens, h_img, STAGE_ANSWER),
        decode)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

@dataclass
class StageExample:
    record_id: str
    input_tokens: list[int]
    target_tokens: list[int]  # includes the trailing end token
    h_img: Tensor


@dataclass
class TrainLogRow:
    step: int
    ce: float
    con: float
    total: float


@dataclass
class TwoStageModel:
    config: RunConfig
    vocab: Vocab
    stage1: ToyModel
    stage2: ToyModel

    @property
    def shared(self) -> bool:
        return self.stage1 is self.stage2

    def run_record(self, record: TripletRecord, h_img: Tensor) -> tuple[Generation, Generation]:
        """Generate a rationale, then infer the answer from it."""
        q = self.vocab.encode(record.question)
        rat = stage1_generate_rationale(
            q, h_img, self.stage1, DecodeConfig(self.config.rationale_max_len))
        ans = stage2_infer_answer(
            q, rat.tokens, h_img, self.stage2, DecodeConfig(self.config.answer_max_len))
        return rat, ans


@dataclass
class TrainResult:
    model: TwoStageModel
    logs: dict[str, list[TrainLogRow]]
    steps: dict[str, int]
    stopped_early: dict[str, bool]


class FeatureStore:
    """Caches image-feature tensors by reference, resolving relative
    paths against a root directory."""

    def __init__(self, root: Path | None = None, expected_width: int | None = None):
        self.root = Path(root) if root is not None else None
        self.expected_width = expected_width
        self._cache: dict[str, Tensor] = {}

    def resolve(self, image_ref: str) -> Path:
        p = Path(image_ref)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def get(self, image_ref: str) -> Tensor:
        if image_ref not in self._cache:
            self._cache[image_ref] = load_image_features(
                self.resolve(image_ref), self.expected_width)
        return self._cache[image_ref]


def make_examples(records: Sequence[TripletRecord], stage: str, vocab: Vocab,
                  features: FeatureStore) -> list[StageExample]:
    examples = []
    for rec in records:
        q = vocab.encode(rec.question)
        if stage == STAGE_RATIONALE:
            inputs = build_stage_tokens(q, None, stage)
            target = vocab.encode(rec.rationale)
        else:
            inputs = build_stage_tokens(q, vocab.encode(rec.rationale), stage)
            target = vocab.encode(rec.answer)
        examples.append(StageExample(record_id=rec.id, input_tokens=inputs,
                                     target_tokens=target + [EOS_ID],
                                     h_img=features.get(rec.image_ref)))
    return examples


def _example_forward(model: ToyModel, ex: StageExample) -> tuple[Tensor, Tensor]:
    """Teacher-forced pass; returns (cross-entropy, decoder states)."""
    states = model.encode_text(ex.input_tokens)
    fused, _ = model.fuse(states, ex.h_img)
    dec_in = [BOS_ID] + ex.target_tokens[:-1]
    dec_states = model.decode_states(fused, dec_in)
    logits = model.logits(dec_states)
    ce = token_cross_entropy(logits, ex.target_tokens, pad_id=PAD_ID)
    return ce, dec_states


def batch_loss(model: ToyModel, batch: Sequence[StageExample], cfg: RunConfig,
               use_contrastive: bool) -> LossBreakdown:
    """Mean cross-entropy over the batch plus the in-batch contrastive
    term (images pooled as anchors, decoder states as texts)."""
    ce_terms = []
    img_embs, txt_embs = [], []
    for i, ex in enumerate(batch):
        ce, dec_states = _example_forward(model, ex)
        ce_terms.append(ce)
        if use_contrastive:
            txt_embs.append(sentence_embed(dec_states, source="text", index=i))
            img_embs.append(sentence_embed(ex.h_img, source="image", index=i))
    ce = ce_terms[0]
    for term in ce_terms[1:]:
        ce = T.add(ce, term)
    ce = T.scale(ce, 1.0 / len(ce_terms))
    if use_contrastive:
        con = contrastive_loss(similarity_matrix(img_embs, txt_embs, cfg.tau))
        lam = cfg.lam
    else:
        con = Tensor(0.0)
        lam = 0.0
    return total_loss(ce, con, lam)


def evaluate_loss(model: ToyModel, examples: Sequence[StageExample], cfg: RunConfig,
                  use_contrastive: bool) -> tuple[float, float, float]:
    """(ce, con, total) means over the split, batched like training but
    in corpus order and without updates."""
    if not examples:
        raise ContractError("evaluate_loss on an empty example list")
    ce_sum = con_sum = total_sum = 0.0
    n = 0
    with T.no_grad():
        for lo in range(0, len(examples), cfg.batch_size):
            batch = examples[lo:lo + cfg.batch_size]
            bd = batch_loss(model, batch, cfg, use_contrastive)
            ce_sum += bd.ce_value * len(batch)
            con_sum += bd.con_value * len(batch)
            total_sum += bd.total_value * len(batch)
            n += len(batch)
    return ce_sum / n, con_sum / n, total_sum / n


def token_accuracy(model: ToyModel, examples: Sequence[StageExample]) -> float:
    """Teacher-forced argmax accuracy over all target positions."""
    hits = total = 0
    with T.no_grad():
        for ex in examples:
            states = model.encode_text(ex.input_tokens)
            fused, _ = model.fuse(states, ex.h_img)
            dec_in = [BOS_ID] + ex.target_tokens[:-1]
            logits = model.logits(model.decode_states(fused, dec_in))
            pred = np.argmax(logits.data, axis=1)
            hits += int((pred == np.asarray(ex.target_tokens)).sum())
            total += len(ex.target_tokens)
    return hits / total if total else 0.0


def _contrastive_applies(cfg: RunConfig, stage: str) -> bool:
    if cfg.lam == 0 or cfg.contrastive_stages == "none":
        return False
    if cfg.contrastive_stages == "both":
        return True
    return (cfg.contrastive_stages == "stage1") == (stage == STAGE_RATIONALE)


def _train_phase(model: ToyModel, train_examples: list[StageExample],
                 val_examples: list[StageExample], cfg: RunConfig,
                 rng: np.random.Generator, use_contrastive: bool
                 ) -> tuple[list[TrainLogRow], int, bool]:
    rows: list[TrainLogRow] = []
    step = 0
    best = float("inf")
    stall = 0
    stopped = False
    for _epoch in range(cfg.epochs):
        order = rng.permutation(len(train_examples))
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_examples[i] for i in order[lo:lo + cfg.batch_size]]
            T.reset_tape()
            try:
                bd = batch_loss(model, batch, cfg, use_contrastive)
                T.backward(bd.total)
                T.sgd_step(model.parameters(), cfg.lr)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}: {exc}") from exc
            rows.append(TrainLogRow(step=step, ce=bd.ce_value, con=bd.con_value,
                                    total=bd.total_value))
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                return rows, step, stopped
        if val_examples:
            try:
                _, _, val_total = evaluate_loss(model, val_examples, cfg, use_contrastive)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite validation loss after step {step}: {exc}") from exc
            if best == float("inf"):
                stall = 0
            else:
                improvement = (best - val_total) / max(abs(best), 1e-12)
                stall = stall + 1 if improvement < cfg.early_stop_tol else 0
            best = min(best, val_total)
            if stall >= cfg.patience:
                stopped = True
                break
    return rows, step, stopped


def train(records: Sequence[TripletRecord], cfg: RunConfig,
          features_root: Path | None = None) -> TrainResult:
    """Train both stages on the corpus's train split, early-stopping on
    the validation split when one is present."""
    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "val"]
    if not train_records:
        raise ContractError("training split is empty")

    vocab = Vocab.build(
        [t for r in records for t in (r.question, r.rationale, r.answer)],
        cap=cfg.vocab_cap)
    features = FeatureStore(root=features_root, expected_width=cfg.d)

    rng = np.random.default_rng(cfg.seed)
    stage1 = ToyModel.init(vocab, cfg, rng)
    stage2 = stage1 if cfg.share_stages else ToyModel.init(vocab, cfg, rng)
    model = TwoStageModel(config=cfg, vocab=vocab, stage1=stage1, stage2=stage2)

    logs: dict[str, list[TrainLogRow]] = {}
    steps: dict[str, int] = {}
    stopped: dict[str, bool] = {}
    if cfg.share_stages:
        train_ex = (make_examples(train_records, STAGE_RATIONALE, vocab, features)
                    + make_examples(train_records, STAGE_ANSWER, vocab, features))
        val_ex = (make_examples(val_records, STAGE_RATIONALE, vocab, features)
                  + make_examples(val_records, STAGE_ANSWER, vocab, features))
        use_con = _contrastive_applies(cfg, STAGE_RATIONALE) or _contrastive_applies(cfg, STAGE_ANSWER)
        logs["shared"], steps["shared"], stopped["shared"] = _train_phase(
            stage1, train_ex, val_ex, cfg, rng, use_con)
    else:
        for name, stage_model, stage in (("stage1", stage1, STAGE_RATIONALE),
                                         ("stage2", stage2, STAGE_ANSWER)):
            train_ex = make_examples(train_records, stage, vocab, features)
            val_ex = make_examples(val_records, stage, vocab, features)
            logs[name], steps[name], stopped[name] = _train_phase(
                stage_model, train_ex, val_ex, cfg, rng, _contrastive_applies(cfg, stage))
    return TrainResult(model=model, logs=logs, steps=steps, stopped_early=stopped)


# --------------------------------------------------------------------------
# Case quadrants
# --------------------------------------------------------------------------

@dataclass
class CaseQuadrant:
    """Prediction classified by rationale validity x answer correctness."""

    rationale_valid: bool
    answer_correct: bool
    threshold_rationale: float
    threshold_answer: float

    @property
    def name(self) -> str:
        r = "valid_rationale" if self.rationale_valid else "invalid_rationale"
        a = "correct_answer" if self.answer_correct else "incorrect_answer"
        return f"{r}/{a}"


QUADRANT_NAMES = (
    "valid_rationale/correct_answer",
    "invalid_rationale/correct_answer",
    "valid_rationale/incorrect_answer",
    "invalid_rationale/incorrect_answer",
)


def classify_case(record: TripletRecord, pred_rationale: str, pred_answer: str,
                  threshold_rationale: float = 0.5,
                  threshold_answer: float = 0.5) -> CaseQuadrant:
    """Rationale is valid when its overlap score reaches the rationale
    threshold; the answer is correct on normalized exact match or
    overlap at the answer threshold. Total: every prediction lands in
    exactly one quadrant."""
    rat_score = rouge_l(tokenize(pred_rationale), tokenize(record.rationale))
    ans_score = rouge_l(tokenize(pred_answer), tokenize(record.answer))
    exact = normalize_text(pred_answer) == normalize_text(record.answer)
    return CaseQuadrant(
        rationale_valid=rat_score >= threshold_rationale,
        answer_correct=exact or ans_score >= threshold_answer,
        threshold_rationale=threshold_rationale,
        threshold_answer=threshold_answer,
    )


# --------------------------------------------------------------------------
# Checkpoints: config snapshot + vocabulary + named parameters
# --------------------------------------------------------------------------

def save_checkpoint(model: TwoStageModel, path) -> None:
    cfg_lines = config_snapshot_lines(model.config)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_CHECKPOINT_MAGIC + "\n")
        fh.write(f"config {len(cfg_lines)}\n")
        for line in cfg_lines:
            fh.write(line + "\n")
        fh.write(f"vocab {len(model.vocab)}\n")
        for tok in model.vocab.tokens:
            fh.write(tok + "\n")
        fh.write(f"shared {'true' if model.shared else 'false'}\n")
        named: dict[str, Tensor] = {}
        if model.shared:
            named.update(model.stage1.named_params("shared"))
        else:
            named.update(model.stage1.named_params("stage1"))
            named.update(model.stage2.named_params("stage2"))
        for name, t in named.items():
            fh.write(f"tensor {name}\n")
            T.write_tensor_block(fh, t)


def _model_from_named(named: dict[str, Tensor], prefix: str, vocab: Vocab,
                      cfg: RunConfig) -> ToyModel:
    from .fusion import fusion_from_named, mha_from_named
    from .model import DecoderParams, EncoderParams, FeedForwardParams

    def ffn(p: str) -> FeedForwardParams:
        return FeedForwardParams(w1=named[f"{p}/w1"], b1=named[f"{p}/b1"],
                                 w2=named[f"{p}/w2"], b2=named[f"{p}/b2"])

    try:
        model = ToyModel(
            vocab=vocab, d=cfg.d, max_positions=cfg.max_positions,
            embed=named[f"{prefix}/embed"], pos=named[f"{prefix}/pos"],
            encoder=EncoderParams(attn=mha_from_named(named, f"{prefix}/encoder/attn"),
                                  ffn=ffn(f"{prefix}/encoder/ffn")),
            fusion=fusion_from_named(named, f"{prefix}/fusion"),
            decoder=DecoderParams(
                self_attn=mha_from_named(named, f"{prefix}/decoder/self_attn"),
                cross_attn=mha_from_named(named, f"{prefix}/decoder/cross_attn"),
                ffn=ffn(f"{prefix}/decoder/ffn"),
                out_w=named[f"{prefix}/decoder/out_w"],
                out_b=named[f"{prefix}/decoder/out_b"],
            ),
        )
    except KeyError as exc:
        raise FileFormatError(f"checkpoint is missing parameter {exc}") from None
    for t in model.parameters():
        t.requires_grad = True
    return model


def load_checkpoint(path) -> TwoStageModel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = iter(fh.read().splitlines())
    try:
        if next(lines) != _CHECKPOINT_MAGIC:
            raise FileFormatError(f"{path}: not a checkpoint file")
        header = next(lines).split()
        if header[:1] != ["config"]:
            raise FileFormatError("expected config section")
        cfg = config_from_snapshot([next(lines) for _ in range(int(header[1]))])
        header = next(lines).split()
        if header[:1] != ["vocab"]:
            raise FileFormatError("expected vocab section")
        vocab = Vocab(tokens=[next(lines) for _ in range(int(header[1]))])
        header = next(lines).split()
        if header[:1] != ["shared"] or header[1] not in ("true", "false"):
            raise FileFormatError("expected shared flag")
        shared = header[1] == "true"
    except StopIteration:
        raise FileFormatError(f"{path}: truncated checkpoint") from None
    named = T.read_named_sections(lines)
    if shared:
        stage1 = _model_from_named(named, "shared", vocab, cfg)
        stage2 = stage1
    else:
        stage1 = _model_from_named(named, "stage1", vocab, cfg)
        stage2 = _model_from_named(named, "stage2", vocab, cfg)
    return TwoStageModel(config=cfg, vocab=vocab, stage1=stage1, stage2=stage2)
