"""Scikit-learn style wrapper: fit an MLM on raw documents, embed or fill masks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, build_model, encode, forward
from .pretrain.data import MaskingPolicy, apply_masking, corpus_windows
from .pretrain.loop import train
from .pretrain.optim import LrSchedule, OptimizerState
from .pretrain.text import MASK, Vocab, tokenize
from .tensor import IGNORE_INDEX, cross_entropy, no_grad
from .validation import check_documents

MASK_MARKER = MASK  # literal "[MASK]" in input text marks a slot for predict


class LazyFormerMLM(TransformerMixin, BaseEstimator):
    """Masked language model over whitespace/punctuation-split words.

    ``fit`` builds a vocabulary from the documents and pre-trains. ``transform``
    returns mean-pooled final hidden states, one row of ``embed_dim`` values
    per document. ``predict`` fills every ``[MASK]`` in a document with the
    most likely word. ``score`` is the negative masked-LM loss.

    Documents longer than ``max_seq_len`` words are truncated for
    ``transform``, ``predict`` and ``score``.
    """

    def __init__(
        self,
        layout="M2x2",
        ffn_width=256,
        embed_dim=64,
        num_heads=4,
        max_seq_len=64,
        max_vocab=None,
        steps=200,
        batch_size=8,
        peak_lr=1e-3,
        warmup_ratio=0.01,
        mask_prob=0.15,
        hidden_dropout_p=0.1,
        random_state=0,
    ):
        self.layout = layout
        self.ffn_width = ffn_width
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.max_seq_len = max_seq_len
        self.max_vocab = max_vocab
        self.steps = steps
        self.batch_size = batch_size
        self.peak_lr = peak_lr
        self.warmup_ratio = warmup_ratio
        self.mask_prob = mask_prob
        self.hidden_dropout_p = hidden_dropout_p
        self.random_state = random_state

    def fit(self, X, y=None):
        docs = check_documents(X)
        self.vocab_ = Vocab.build(docs, max_size=self.max_vocab)
        config = ModelConfig(
            ffn_width=self.ffn_width,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            vocab_size=len(self.vocab_),
            max_seq_len=self.max_seq_len,
            layout=self.layout,
            hidden_dropout_p=self.hidden_dropout_p,
        )
        self.model_ = build_model(config, np.random.default_rng([self.random_state, 0]))
        self.policy_ = MaskingPolicy(len(self.vocab_), mask_prob=self.mask_prob)
        windows = corpus_windows(docs, self.vocab_, self.max_seq_len)
        rows = train(
            self.model_,
            windows,
            steps=self.steps,
            batch_size=self.batch_size,
            sched=LrSchedule.from_ratio(self.peak_lr, self.steps, self.warmup_ratio),
            policy=self.policy_,
            seed=self.random_state,
            opt=OptimizerState(),
        )
        self.loss_curve_ = np.array([r.loss for r in rows])
        self.n_features_out_ = self.embed_dim
        return self

    def _ids(self, doc: str) -> np.ndarray:
        pieces = doc.split(MASK_MARKER)
        ids = []
        for i, piece in enumerate(pieces):
            if i:
                ids.append(self.vocab_.mask_id)
            ids.extend(tokenize(piece, self.vocab_))
        if not ids:
            ids = [self.vocab_.sep_id]
        return np.asarray(ids[: self.max_seq_len], dtype=np.int64)

    def transform(self, X):
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        out = np.empty((len(docs), self.embed_dim))
        with no_grad():
            for i, doc in enumerate(docs):
                hidden, _ = encode(self.model_, self._ids(doc))
                out[i] = hidden.data.mean(axis=0)
        return out

    def predict(self, X):
        """Each document with its ``[MASK]`` slots replaced by predicted words."""
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        specials = sorted(self.vocab_.special_ids)
        filled = []
        with no_grad():
            for doc in docs:
                ids = self._ids(doc)
                slots = np.flatnonzero(ids == self.vocab_.mask_id)
                words = self.vocab_.decode(ids)
                if slots.size:
                    logits, _ = forward(self.model_, ids)
                    scores = logits.data[slots].copy()
                    scores[:, specials] = -np.inf
                    for slot, best in zip(slots, scores.argmax(axis=1)):
                        words[slot] = self.vocab_.tokens[best]
                filled.append(" ".join(words))
        return np.array(filled, dtype=object)

    def score(self, X, y=None):
        """Negative mean masked-LM cross-entropy under a fixed seeded corruption."""
        check_is_fitted(self, "model_")
        docs = check_documents(X)
        rng = np.random.default_rng([self.random_state, 2])
        total, count = 0.0, 0
        with no_grad():
            for doc in docs:
                corrupted, labels = apply_masking(self._ids(doc), self.policy_, rng)
                k = int((labels != IGNORE_INDEX).sum())
                if k == 0:
                    continue
                logits, _ = forward(self.model_, corrupted)
                total += cross_entropy(logits, labels, reduction="sum").item()
                count += k
        if count == 0:
            raise ValueError("no maskable words in the given documents")
        return -total / count
