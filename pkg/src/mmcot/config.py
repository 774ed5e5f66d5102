"""Run configuration: plain key-value files with environment overrides.

File format is one `key = value` per line, `#` comments allowed. Every
key can also be overridden through the environment as MMCOT_<KEY in
upper case>, e.g. MMCOT_LR=0.01.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Mapping

from .errors import FileFormatError, ParameterError

ENV_PREFIX = "MMCOT_"

# dataclass field name -> key used in config files ("lambda" is a python
# keyword, hence the one alias).
_KEY_ALIASES = {"lam": "lambda"}


@dataclass
class RunConfig:
    # model geometry
    d: int = 16
    heads: int = 2
    hops: int = 2
    ffn_mult: int = 2
    vocab_cap: int = 256
    max_positions: int = 64
    gate_bias: bool = True
    init_scale: float = 0.1  # encoder/decoder/embedding init half-width
    # optimization (50 epochs, batch 32, lr 5e-5 as defaults; the toy
    # fixtures override them)
    epochs: int = 50
    batch_size: int = 32
    lr: float = 5e-5
    lam: float = 0.1
    tau: float = 0.1
    seed: int = 0
    max_steps: int = 0  # 0 = no cap
    # early stopping on validation loss
    patience: int = 3
    early_stop_tol: float = 1e-4
    # decoding
    rationale_max_len: int = 32
    answer_max_len: int = 8
    # case-quadrant thresholds
    threshold_rationale: float = 0.5
    threshold_answer: float = 0.5
    # where the contrastive term applies: both | stage1 | stage2 | none
    contrastive_stages: str = "both"
    # train one parameter set for both stages instead of two
    share_stages: bool = False

    def __post_init__(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ParameterError(f"width {self.d} must divide into {self.heads} heads")
        if self.hops < 0:
            raise ParameterError("hops must be >= 0")
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.contrastive_stages not in ("both", "stage1", "stage2", "none"):
            raise ParameterError(
                f"contrastive_stages must be both/stage1/stage2/none, got {self.contrastive_stages!r}")

    def key_items(self) -> list[tuple[str, object]]:
        """(config-file key, value) pairs in declaration order."""
        out = []
        for f in fields(self):
            out.append((_KEY_ALIASES.get(f.name, f.name), getattr(self, f.name)))
        return out


def _coerce(field_type: type, raw: str, key: str):
    raw = raw.strip()
    if field_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ParameterError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
    except ValueError:
        raise ParameterError(f"config key {key}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FileFormatError(f"{source}:{lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config(path=None, env: Mapping[str, str] | None = None,
                overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Build a RunConfig from (in increasing precedence) defaults, file,
    environment variables, and explicit overrides."""
    env = os.environ if env is None else env
    by_key = {}
    for f in fields(RunConfig):
        by_key[_KEY_ALIASES.get(f.name, f.name)] = f

    kwargs: dict[str, object] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            raw = parse_config_text(fh.read(), source=str(path))
        for key, value in raw.items():
            if key not in by_key:
                raise ParameterError(f"unknown config key {key!r} in {path}")
            f = by_key[key]
            kwargs[f.name] = _coerce(type(f.default), value, key)
    for key, f in by_key.items():
        env_name = ENV_PREFIX + key.upper()
        if env_name in env:
            kwargs[f.name] = _coerce(type(f.default), env[env_name], key)
    if overrides:
        for name, value in overrides.items():
            if value is None:
                continue
            if name not in {f.name for f in fields(RunConfig)}:
                raise ParameterError(f"unknown config override {name!r}")
            kwargs[name] = value
    return RunConfig(**kwargs)


def config_snapshot_lines(cfg: RunConfig) -> list[str]:
    return [f"{key} = {value}" for key, value in cfg.key_items()]


def config_from_snapshot(lines: list[str]) -> RunConfig:
    raw = parse_config_text("\n".join(lines), source="<snapshot>")
    by_key = {_KEY_ALIASES.get(f.name, f.name): f for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in by_key:
            raise FileFormatError(f"unknown config key {key!r} in checkpoint snapshot")
        f = by_key[key]
        kwargs[f.name] = _coerce(type(f.default), value, key)
    return RunConfig(**kwargs)
