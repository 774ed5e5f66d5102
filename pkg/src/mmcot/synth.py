"""Synthetic fixtures: seeded image-feature files and toy corpora.

Two corpus flavors are provided. ``memorization_corpus`` gives every
record distinct texts and features (overfitting drills and
reproducibility checks). ``image_keyed_corpus`` makes the rationale and
answer decidable only from the image features: every question is the
same string, while the features cluster around one of a few class
prototypes, so a model must read the image to say anything useful.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .dataset import TripletRecord
from .tensor import Tensor, save_tensor

_WORDS = ("river", "stone", "cloud", "maple", "otter", "lantern", "meadow",
          "harbor", "falcon", "ember", "willow", "canyon", "drift", "prism",
          "summit", "grove", "cedar", "marsh", "comet", "fable", "anchor",
          "breeze", "copper", "dune", "fern", "glade", "heron", "islet",
          "jetty", "kelp", "loom", "moss")

CLASS_WORDS = ("red", "green", "blue", "yellow", "purple", "orange")


def synthetic_features(seed: int, rows: int = 4, width: int = 16,
                       offset: np.ndarray | None = None) -> Tensor:
    """Deterministic feature block for a given seed; identical across
    runs and processes."""
    rng = np.random.default_rng(seed)
    data = rng.uniform(-1.0, 1.0, size=(rows, width))
    if offset is not None:
        data = data * 0.1 + offset[None, :]
    return Tensor(data)


def memorization_corpus(out_dir: Path, n_records: int = 16, width: int = 16,
                        rows: int = 4, seed: int = 0) -> list[TripletRecord]:
    """Small corpus of distinct triplets with per-record feature files.

    All records land in the train split; texts reuse a fixed word list
    so the vocabulary stays tiny.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_records):
        w = [_WORDS[int(rng.integers(len(_WORDS)))] for _ in range(6)]
        ref = f"feat_{i}.txt"
        save_tensor(synthetic_features(seed * 1000 + i, rows, width), out_dir / ref)
        records.append(TripletRecord(
            id=str(i),
            question=f"where is the {w[0]} near the {w[1]}",
            rationale=f"the {w[0]} sits beside the {w[2]} and the {w[3]}",
            answer=f"by the {w[4]}",
            image_ref=ref,
            split="train",
            source="vqa",
        ))
    return records


def image_keyed_corpus(out_dir: Path, n_train: int = 32, n_val: int = 16,
                       width: int = 16, rows: int = 4, n_classes: int = 4,
                       seed: int = 0) -> list[TripletRecord]:
    """Corpus whose answers are recoverable only from image features.

    Class prototypes are mutually distant unit-scale vectors; each
    record's features are a small perturbation of its class prototype.
    The question never varies across records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    protos = rng.uniform(-1.0, 1.0, size=(n_classes, width))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    records = []
    for i in range(n_train + n_val):
        cls = i % n_classes
        split = "train" if i < n_train else "val"
        ref = f"feat_{split}_{i}.txt"
        feats = synthetic_features(seed * 7919 + i, rows, width, offset=protos[cls])
        save_tensor(feats, out_dir / ref)
        word = CLASS_WORDS[cls]
        records.append(TripletRecord(
            id=f"{split}-{i}",
            question="what color is the marker in this picture",
            rationale=f"the marker in the picture is {word}",
            answer=word,
            image_ref=ref,
            split=split,
            source="vqa",
        ))
    return records
