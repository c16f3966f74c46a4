"""Input validation helpers shared by the model, trainer and estimator."""

from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from .errors import LengthError, VocabularyError


def check_token_ids(token_ids, vocab_size: int, max_len: int | None = None) -> np.ndarray:
    """Return ``token_ids`` as a 1-D int64 array after range and length checks."""
    ids = np.asarray(token_ids)
    if ids.ndim != 1:
        raise VocabularyError(f"token ids must be a 1-D sequence, got shape {ids.shape}")
    if ids.size == 0:
        raise LengthError("token id sequence is empty")
    if not np.issubdtype(ids.dtype, np.integer):
        if not np.all(np.equal(np.mod(ids, 1), 0)):
            raise VocabularyError("token ids must be integers")
    ids = ids.astype(np.int64)
    if max_len is not None and ids.size > max_len:
        raise LengthError(f"sequence length {ids.size} exceeds max_seq_len {max_len}")
    bad = np.flatnonzero((ids < 0) | (ids >= vocab_size))
    if bad.size:
        i = int(bad[0])
        raise VocabularyError(f"token id {int(ids[i])} at position {i} outside vocabulary of size {vocab_size}")
    return ids


def check_documents(X) -> list[str]:
    """Accept a string iterable (list, array, Series); reject a bare string."""
    if isinstance(X, (str, bytes)):
        raise TypeError("expected an iterable of documents, got a single string")
    if not isinstance(X, Iterable):
        raise TypeError(f"expected an iterable of documents, got {type(X).__name__}")
    docs = list(X)
    for i, doc in enumerate(docs):
        if not isinstance(doc, str):
            raise TypeError(f"document {i} is {type(doc).__name__}, expected str")
    if not docs:
        raise ValueError("no documents given")
    return docs


def check_probability(name: str, value: float, *, closed_upper: bool = False) -> float:
    value = float(value)
    upper_ok = value <= 1.0 if closed_upper else value < 1.0
    if not (0.0 <= value and upper_ok):
        bound = "]" if closed_upper else ")"
        raise ValueError(f"{name} must lie in [0, 1{bound}, got {value}")
    return value
