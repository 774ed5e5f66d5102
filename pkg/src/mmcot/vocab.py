"""Whitespace-token vocabulary for the toy pipeline.

Ids 0-4 are reserved specials; corpus tokens follow in sorted order so
vocabulary construction is deterministic for a given corpus.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import VocabularyError

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "<sep>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, SEP_TOKEN, UNK_TOKEN)

PAD_ID, BOS_ID, EOS_ID, SEP_ID, UNK_ID = range(5)


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if list(self.tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise VocabularyError("vocabulary must start with the special tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], cap: int = 256) -> "Vocab":
        words = sorted({w for text in texts for w in text.split()})
        tokens = list(SPECIAL_TOKENS) + words
        if len(tokens) > cap:
            raise VocabularyError(
                f"vocabulary of {len(tokens)} tokens exceeds the cap of {cap}")
        return cls(tokens=tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        words = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self)}")
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            words.append(self.tokens[i])
        return " ".join(words)
