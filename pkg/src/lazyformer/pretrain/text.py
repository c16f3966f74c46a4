"""Deterministic word-level tokenizer and vocabulary files."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path

from ..errors import VocabularyError

PAD, MASK, UNK, SEP = "[PAD]", "[MASK]", "[UNK]", "[SEP]"
SPECIALS = (PAD, MASK, UNK, SEP)

_WORD = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def split_words(text: str) -> list[str]:
    """Lower-case, then split into word runs and single punctuation marks."""
    return _WORD.findall(text.lower())


class Vocab:
    """Token list where the line number (index) is the id; specials come first."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            raise VocabularyError(f"vocabulary must start with {', '.join(SPECIALS)}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def build(cls, texts, max_size=None, min_count=1) -> "Vocab":
        """Most frequent words first, ties broken alphabetically."""
        counts = Counter(w for text in texts for w in split_words(text))
        words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS), key=lambda w: (-counts[w], w))
        if max_size is not None:
            words = words[: max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + words)

    @classmethod
    def from_file(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(line for line in lines if line != "")

    def to_file(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    @property
    def pad_id(self):
        return 0

    @property
    def mask_id(self):
        return 1

    @property
    def unk_id(self):
        return 2

    @property
    def sep_id(self):
        return 3

    @property
    def special_ids(self) -> frozenset:
        return frozenset(range(len(SPECIALS)))

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab.id_of(w) for w in split_words(text)]
