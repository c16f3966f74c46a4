"""Multi-head attention with T5-style relative position bias.

Two entry points: :func:`compute_attention` runs the full
``softmax(Q K^T / sqrt(d) + B) V`` path and returns the post-softmax
distribution as an :class:`AttentionCache`; :func:`reuse_attention`
multiplies a cached distribution by freshly projected values and never
forms ``Q K^T`` or runs a softmax.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import CacheError, ConfigError, LengthError, ShapeError
from .tensor import (
    Tensor,
    add,
    counters,
    dropout,
    guarded,
    matmul,
    record_op,
    softmax_backward,
    softmax_inplace,
)

# exp, sum, div, max, sub per attention entry
SOFTMAX_FLOPS_PER_ENTRY = 5


def relative_bucket(offset, num_buckets: int = 32, max_distance: int = 128):
    """Bidirectional T5 bucket for ``offset = key_position - query_position``.

    Accepts an int or an integer array. Half of the buckets serve each sign;
    within a half, small distances get their own bucket and larger ones share
    logarithmically wider buckets up to ``max_distance``, beyond which they
    clamp to the last bucket.
    """
    scalar = np.isscalar(offset)
    offset = np.asarray(offset, dtype=np.int64)
    half = num_buckets // 2
    base = np.where(offset > 0, half, 0)
    dist = np.abs(offset)
    max_exact = half // 2
    if max_exact == 0:
        out = base
    else:
        ratio = np.log(np.maximum(dist, max_exact) / max_exact) / math.log(max_distance / max_exact)
        large = max_exact + (ratio * (half - max_exact)).astype(np.int64)
        large = np.minimum(large, half - 1)
        out = base + np.where(dist < max_exact, dist, large)
    return int(out) if scalar else out


@functools.lru_cache(maxsize=8)
def _bucket_matrix(n: int, num_buckets: int, max_distance: int) -> np.ndarray:
    pos = np.arange(n)
    buckets = relative_bucket(pos[None, :] - pos[:, None], num_buckets, max_distance)
    buckets.setflags(write=False)
    return buckets


@dataclass
class RelativeBias:
    """Learned per-head scalar added to attention logits, indexed by offset bucket."""

    table: Tensor
    num_buckets: int = 32
    max_distance: int = 128

    def __post_init__(self):
        if self.num_buckets < 2 or self.max_distance <= self.num_buckets:
            raise ConfigError(
                f"relative bias needs num_buckets >= 2 and max_distance > num_buckets, "
                f"got {self.num_buckets}, {self.max_distance}"
            )
        if self.table.data.ndim != 2 or self.table.shape[0] != self.num_buckets:
            raise ShapeError(f"bias table must be [{self.num_buckets} x heads], got {self.table.shape}")

    @property
    def num_heads(self) -> int:
        return self.table.shape[1]

    def matrix(self, n: int) -> Tensor:
        """The [heads x n x n] bias for a length-``n`` sequence."""
        return position_bias(self.table, _bucket_matrix(n, self.num_buckets, self.max_distance))


@guarded("position_bias")
def position_bias(table: Tensor, buckets: np.ndarray) -> Tensor:
    nb = table.shape[0]
    out = table.data.T[:, buckets]

    def _back(g):
        flat = buckets.reshape(-1)
        cols = [np.bincount(flat, weights=g[h].reshape(-1), minlength=nb) for h in range(g.shape[0])]
        return (np.stack(cols, axis=1),)

    return record_op(out, "position_bias", (table,), _back)


@guarded("attention_probs")
def attention_probs(q: Tensor, k: Tensor, bias: Tensor | None, num_heads: int) -> Tensor:
    """Per-head ``softmax(Q_h K_h^T / sqrt(d) + B_h)`` as one [heads x n x n] tensor."""
    n, width = q.shape
    d = width // num_heads
    scale = 1.0 / math.sqrt(d)
    qd, kd = q.data, k.data
    probs = np.empty((num_heads, n, n))
    for h in range(num_heads):
        cols = slice(h * d, (h + 1) * d)
        np.matmul(qd[:, cols], kd[:, cols].T, out=probs[h])
    probs *= scale
    if bias is not None:
        if bias.shape != probs.shape:
            raise ShapeError(f"position bias shape {bias.shape} does not match attention {probs.shape}")
        probs += bias.data
    softmax_inplace(probs)
    c = counters()
    c.flops += 2 * n * n * width + SOFTMAX_FLOPS_PER_ENTRY * num_heads * n * n
    c.softmax_nn += num_heads

    def _back(g):
        ds = softmax_backward(probs, g)
        dq = np.empty_like(qd)
        dk = np.empty_like(kd)
        for h in range(num_heads):
            cols = slice(h * d, (h + 1) * d)
            dq[:, cols] = (ds[h] @ kd[:, cols]) * scale
            dk[:, cols] = (ds[h].T @ qd[:, cols]) * scale
        return dq, dk, ds

    inputs = (q, k) if bias is None else (q, k, bias)
    return record_op(probs, "attention_probs", inputs, _back)


@guarded("attend")
def attend(probs: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Concatenate ``probs[h] @ V_h`` over heads into an [n x H] tensor."""
    n, width = v.shape
    if probs.shape != (num_heads, n, n):
        raise ShapeError(f"attention distribution {probs.shape} does not fit values {v.shape}")
    d = width // num_heads
    pd, vd = probs.data, v.data
    out = np.empty((n, width))
    for h in range(num_heads):
        cols = slice(h * d, (h + 1) * d)
        out[:, cols] = pd[h] @ vd[:, cols]
    counters().flops += 2 * n * n * width

    def _back(g):
        dp = np.empty_like(pd) if probs.requires_grad else None
        dv = np.empty_like(vd)
        for h in range(num_heads):
            cols = slice(h * d, (h + 1) * d)
            if dp is not None:
                dp[h] = g[:, cols] @ vd[:, cols].T
            dv[:, cols] = pd[h].T @ g[:, cols]
        return dp, dv

    return record_op(out, "attend", (probs, v), _back)


@dataclass
class AttentionParams:
    """Projection weights of one attention sub-layer.

    Computing layers carry ``wq``/``wk``; reusing layers carry neither.
    """

    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    num_heads: int
    wq: Tensor | None = None
    bq: Tensor | None = None
    wk: Tensor | None = None
    bk: Tensor | None = None

    def __post_init__(self):
        qk = [self.wq, self.bq, self.wk, self.bk]
        if any(t is None for t in qk) and any(t is not None for t in qk):
            raise ConfigError("wq/bq and wk/bk must be all present (computing layer) or all absent (reusing layer)")
        width = self.wv.shape[0]
        if self.num_heads < 1 or width % self.num_heads:
            raise ConfigError(f"embedding dim {width} not divisible by {self.num_heads} heads")

    @property
    def is_computing(self) -> bool:
        return self.wq is not None

    @property
    def width(self) -> int:
        return self.wv.shape[0]

    def tensors(self) -> list[tuple[str, Tensor]]:
        names = ["wq", "bq", "wk", "bk"] if self.is_computing else []
        names += ["wv", "bv", "wo", "bo"]
        return [(name, getattr(self, name)) for name in names]


@dataclass(frozen=True)
class AttentionCache:
    """Pre-dropout attention distribution of a computing layer, [heads x n x n]."""

    probs: Tensor
    seq_len: int

    def __post_init__(self):
        self.probs.data.setflags(write=False)


@dataclass(frozen=True)
class DropoutPolicy:
    p: float = 0.0
    training: bool = False

    @property
    def active(self) -> bool:
        return self.training and self.p > 0.0


NO_DROPOUT = DropoutPolicy()


def _distribution_for_layer(cache_probs, policy, rng):
    if policy is None or not policy.active:
        return cache_probs
    if rng is None:
        raise ConfigError("attention dropout in training mode needs a random generator")
    return dropout(cache_probs, policy.p, rng)


def compute_attention(x, params, bias=None, dropout_policy=None, rng=None, max_seq_len=None):
    """Full attention for a block's first layer.

    ``bias`` is a :class:`RelativeBias`, a precomputed [heads x n x n] tensor,
    or ``None``. Returns ``(output, cache)``.
    """
    if not params.is_computing:
        raise ConfigError("compute_attention needs a computing layer (wq and wk present)")
    n = x.shape[0]
    if max_seq_len is not None and n > max_seq_len:
        raise LengthError(f"sequence length {n} exceeds maximum {max_seq_len}")
    if isinstance(bias, RelativeBias):
        bias = bias.matrix(n)
    q = add(matmul(x, params.wq), params.bq)
    k = add(matmul(x, params.wk), params.bk)
    v = add(matmul(x, params.wv), params.bv)
    probs = attention_probs(q, k, bias, params.num_heads)
    cache = AttentionCache(probs, n)
    context = attend(_distribution_for_layer(probs, dropout_policy, rng), v, params.num_heads)
    return add(matmul(context, params.wo), params.bo), cache


def reuse_attention(x, params, cache, dropout_policy=None, rng=None):
    """Attention for a non-first layer: cached distribution times fresh values."""
    if params.is_computing:
        raise ConfigError("reuse_attention got a computing layer (wq/wk present); layer kind mismatch")
    n = x.shape[0]
    if cache.seq_len != n:
        raise CacheError(f"cache was built for length {cache.seq_len}, input has length {n}")
    if cache.probs.shape[0] != params.num_heads:
        raise CacheError(f"cache has {cache.probs.shape[0]} heads, layer expects {params.num_heads}")
    v = add(matmul(x, params.wv), params.bv)
    context = attend(_distribution_for_layer(cache.probs, dropout_policy, rng), v, params.num_heads)
    return add(matmul(context, params.wo), params.bo)
