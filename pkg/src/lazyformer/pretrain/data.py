"""MLM corruption, sequence packing, batching and a synthetic corpus."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensor import IGNORE_INDEX
from ..validation import check_probability
from .text import SPECIALS, Vocab, tokenize


@dataclass(frozen=True)
class MaskingPolicy:
    """Select ``mask_prob`` of maskable positions; replace 80/10/10 by [MASK]/random/kept."""

    vocab_size: int
    mask_prob: float = 0.15
    mask_token_frac: float = 0.80
    random_frac: float = 0.10
    keep_frac: float = 0.10
    mask_token_id: int = 1
    pad_token_id: int = 0
    special_ids: frozenset = frozenset(range(len(SPECIALS)))

    def __post_init__(self):
        check_probability("mask_prob", self.mask_prob, closed_upper=True)
        for name in ("mask_token_frac", "random_frac", "keep_frac"):
            check_probability(name, getattr(self, name), closed_upper=True)
        total = self.mask_token_frac + self.random_frac + self.keep_frac
        if not math.isclose(total, 1.0, abs_tol=1e-12):
            raise ValueError(f"replacement fractions must sum to 1, got {total}")
        if self.vocab_size <= len(self.special_ids):
            raise ValueError("vocabulary has no non-special tokens to sample")


def apply_masking(tokens, policy: MaskingPolicy, rng: np.random.Generator):
    """Return ``(corrupted, labels)``; labels hold originals at selected positions, -1 elsewhere."""
    tokens = np.asarray(tokens, dtype=np.int64)
    corrupted = tokens.copy()
    labels = np.full(tokens.shape, IGNORE_INDEX, dtype=np.int64)
    maskable = ~np.isin(tokens, list(policy.special_ids))
    selected = (rng.random(tokens.shape) < policy.mask_prob) & maskable
    choice = rng.random(tokens.shape)
    to_mask = selected & (choice < policy.mask_token_frac)
    to_random = selected & (choice >= policy.mask_token_frac) & (choice < policy.mask_token_frac + policy.random_frac)
    random_ids = rng.integers(len(policy.special_ids), policy.vocab_size, size=tokens.shape)
    corrupted[to_mask] = policy.mask_token_id
    corrupted[to_random] = random_ids[to_random]
    labels[selected] = tokens[selected]
    return corrupted, labels


def pack_documents(docs_ids, seq_len: int, sep_id: int) -> np.ndarray:
    """Concatenate documents separated by [SEP] and cut fixed-length windows.

    The trailing partial window is dropped.
    """
    stream = []
    for ids in docs_ids:
        if len(ids) == 0:
            continue
        stream.extend(ids)
        stream.append(sep_id)
    count = len(stream) // seq_len
    if count == 0:
        raise ValueError(f"corpus has {len(stream)} tokens, fewer than one window of {seq_len}")
    return np.asarray(stream[: count * seq_len], dtype=np.int64).reshape(count, seq_len)


@dataclass
class Batch:
    inputs: np.ndarray  # [batch x n] corrupted ids
    labels: np.ndarray  # [batch x n], IGNORE_INDEX where not predicted

    def __len__(self):
        return self.inputs.shape[0]


def make_batch(windows: np.ndarray, batch_index: int, batch_size: int, seed: int, policy: MaskingPolicy) -> Batch:
    """Sample and corrupt one batch; depends only on ``(seed, batch_index)``."""
    rng = np.random.default_rng([seed, batch_index])
    rows = rng.integers(0, windows.shape[0], size=batch_size)
    pairs = [apply_masking(windows[r], policy, rng) for r in rows]
    return Batch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(count: int) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = []
    i = 0
    while len(words) < count:
        a, rest = divmod(i, len(syllables))
        word = syllables[rest] if a == 0 else syllables[(a - 1) % len(syllables)] + syllables[rest]
        if a > len(syllables):
            word += str(a)
        words.append(word)
        i += 1
    return words


def synthetic_corpus(
    num_docs: int = 400,
    num_words: int = 300,
    seed: int = 0,
    zipf_a: float = 1.1,
    periods=(3, 4, 5, 6),
    doc_len=(60, 120),
) -> list[str]:
    """Documents made of one short Zipf-sampled motif repeated to fill the document.

    A masked word is recoverable from the same position in a neighbouring
    repeat of the motif, and the motif's few distinct words dominate every
    training window, which gives a small MLM something to learn quickly.
    """
    rng = np.random.default_rng(seed)
    words = _pseudo_words(num_words)
    ranks = np.arange(1, num_words + 1, dtype=np.float64)
    probs = ranks**-zipf_a
    probs /= probs.sum()
    docs = []
    for _ in range(num_docs):
        period = int(rng.choice(periods))
        motif = rng.choice(num_words, size=period, p=probs)
        length = int(rng.integers(doc_len[0], doc_len[1] + 1))
        docs.append(" ".join(words[motif[i % period]] for i in range(length)))
    return docs


def write_synthetic_corpus(corpus_path, vocab_path, **kwargs):
    docs = synthetic_corpus(**kwargs)
    Path(corpus_path).write_text("".join(d + "\n" for d in docs), encoding="utf-8")
    vocab = Vocab.build(docs)
    vocab.to_file(vocab_path)
    return docs, vocab


def read_corpus(path) -> list[str]:
    """One document per non-empty line of a UTF-8 text file."""
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def corpus_windows(docs, vocab: Vocab, seq_len: int) -> np.ndarray:
    return pack_documents([tokenize(d, vocab) for d in docs], seq_len, vocab.sep_id)
