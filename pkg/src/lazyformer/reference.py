"""Plain-numpy standard Transformer encoder, used as an equivalence oracle.

Shares no code with the tensor engine or the attention module: every layer
computes its own query/key projections and softmax, with no cache. Only
valid for layouts made of single-layer blocks (``M1xk``).
"""

from __future__ import annotations

import math

import numpy as np


def _t5_bucket(offset: int, num_buckets: int, max_distance: int) -> int:
    half = num_buckets // 2
    bucket = half if offset > 0 else 0
    dist = abs(offset)
    exact = half // 2
    if exact == 0:
        return bucket
    if dist < exact:
        return bucket + dist
    far = exact + int(math.log(dist / exact) / math.log(max_distance / exact) * (half - exact))
    return bucket + min(far, half - 1)


def _layer_norm(x, gain, bias, eps=1e-12):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def standard_transformer_logits(weights: dict, config, token_ids) -> np.ndarray:
    """Logits of a post-norm BERT-style encoder with relative position bias.

    ``weights`` maps parameter names (as produced by
    ``LazyFormer.named_parameters``) to arrays.
    """
    sizes = config.layout.block_sizes
    if any(m != 1 for m in sizes):
        raise ValueError("the reference encoder only covers single-layer blocks")
    ids = np.asarray(token_ids, dtype=np.int64)
    n = ids.size
    heads = config.num_heads
    d = config.embed_dim // heads

    x = weights["embeddings.token"][ids] + weights["embeddings.position"][:n]
    x = _layer_norm(x, weights["embeddings.norm.gain"], weights["embeddings.norm.bias"])

    table = weights["attention.relative_bias"]
    bias = np.zeros((heads, n, n))
    for i in range(n):
        for j in range(n):
            bias[:, i, j] = table[_t5_bucket(j - i, config.num_rel_buckets, config.rel_max_distance)]

    for layer in range(len(sizes)):
        w = {k.split(f"blocks.{layer}.layers.0.", 1)[1]: v for k, v in weights.items() if k.startswith(f"blocks.{layer}.layers.0.")}
        q = x @ w["attention.wq"] + w["attention.bq"]
        k = x @ w["attention.wk"] + w["attention.bk"]
        v = x @ w["attention.wv"] + w["attention.bv"]
        heads_out = []
        for h in range(heads):
            cols = slice(h * d, (h + 1) * d)
            scores = q[:, cols] @ k[:, cols].T / math.sqrt(d) + bias[h]
            heads_out.append(_softmax(scores) @ v[:, cols])
        attn = np.concatenate(heads_out, axis=1) @ w["attention.wo"] + w["attention.bo"]
        x = _layer_norm(x + attn, w["norm1.gain"], w["norm1.bias"])
        ff = _gelu(x @ w["ffn.w_in"] + w["ffn.b_in"]) @ w["ffn.w_out"] + w["ffn.b_out"]
        x = _layer_norm(x + ff, w["norm2.gain"], w["norm2.bias"])

    return x @ weights["embeddings.token"].T + weights["head.bias"]
