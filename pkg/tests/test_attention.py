import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lazyformer.attention import (
    AttentionCache,
    AttentionParams,
    DropoutPolicy,
    RelativeBias,
    compute_attention,
    relative_bucket,
    reuse_attention,
)
from lazyformer.errors import CacheError, ConfigError, LengthError
from lazyformer.gradcheck import numeric_grad, relative_error
from lazyformer.tensor import Tensor, counters, mul, tensor_sum


def t5_bucket(offset, num_buckets=32, max_distance=128):
    """Scalar transcription of the bidirectional T5 bucketing rule."""
    half = num_buckets // 2
    bucket = half if offset > 0 else 0
    dist = abs(offset)
    exact = half // 2
    if dist < exact:
        return bucket + dist
    log_part = exact + int(math.log(dist / exact) / math.log(max_distance / exact) * (half - exact))
    return bucket + min(log_part, half - 1)


# offsets -10..10 at (32, 128), frozen from the oracle above
HAND_TABLE = [8, 8, 8, 7, 6, 5, 4, 3, 2, 1, 0, 17, 18, 19, 20, 21, 22, 23, 24, 24, 24]


def make_params(h, heads, seed, computing=True, scale=0.5):
    rng = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(rng.normal(0, scale, size=shape), requires_grad=True)

    kw = dict(wv=w(h, h), bv=w(h), wo=w(h, h), bo=w(h), num_heads=heads)
    if computing:
        kw.update(wq=w(h, h), bq=w(h), wk=w(h, h), bk=w(h))
    return AttentionParams(**kw)


def naive_attention(x, p, table, buckets):
    """Explicit loops over heads, queries and keys."""
    n, h = x.shape
    heads = p.num_heads
    d = h // heads
    q = x @ p.wq.data + p.bq.data
    k = x @ p.wk.data + p.bk.data
    v = x @ p.wv.data + p.bv.data
    ctx = np.zeros((n, h))
    for head in range(heads):
        lo = head * d
        for i in range(n):
            logits = []
            for j in range(n):
                s = sum(q[i, lo + c] * k[j, lo + c] for c in range(d)) / math.sqrt(d)
                logits.append(s + table[buckets(j - i), head])
            m = max(logits)
            e = [math.exp(z - m) for z in logits]
            total = sum(e)
            for j in range(n):
                ctx[i, lo : lo + d] += e[j] / total * v[j, lo : lo + d]
    return ctx @ p.wo.data + p.bo.data


# relative buckets


def test_bucket_zero_offset():
    assert relative_bucket(0) == 0


def test_bucket_hand_table():
    assert [relative_bucket(o) for o in range(-10, 11)] == HAND_TABLE
    assert [t5_bucket(o) for o in range(-10, 11)] == HAND_TABLE


def test_bucket_matches_scalar_oracle_exhaustively():
    offsets = np.arange(-600, 601)
    for nb, md in ((32, 128), (8, 20), (16, 64), (4, 10)):
        got = relative_bucket(offsets, nb, md)
        assert got.tolist() == [t5_bucket(int(o), nb, md) for o in offsets]
    # two buckets: sign only
    assert relative_bucket(offsets, 2, 10).tolist() == [int(o > 0) for o in offsets]


def test_bucket_clamps_beyond_max_distance():
    far = {relative_bucket(o) for o in range(-2000, -127)}
    assert far == {15}
    assert {relative_bucket(o) for o in range(128, 2000)} == {31}


@given(st.integers(-10_000, 10_000), st.integers(-10_000, 10_000))
def test_bucket_monotone_in_distance_per_sign(a, b):
    if a == b or (a > 0) != (b > 0) or (a == 0) != (b == 0):
        return
    near, far = sorted((a, b), key=abs)
    assert relative_bucket(near) <= relative_bucket(far)


@given(st.integers(-(10**6), 10**6))
def test_bucket_total_and_in_range(offset):
    assert 0 <= relative_bucket(offset) < 32


# compute_attention


def test_single_token_attends_to_itself():
    p = make_params(8, 2, 0)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 8)))
    out, cache = compute_attention(x, p)
    np.testing.assert_array_equal(cache.probs.data, np.ones((2, 1, 1)))
    expect = (x.data @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_zero_query_key_gives_uniform():
    p = make_params(4, 1, 0)
    for t in (p.wq, p.wk, p.bq, p.bk):
        t.data[...] = 0
    bias = RelativeBias(Tensor(np.zeros((32, 1))))
    _, cache = compute_attention(Tensor(np.random.default_rng(2).normal(size=(6, 4))), p, bias)
    np.testing.assert_allclose(cache.probs.data, np.full((1, 6, 6), 1 / 6), atol=1e-15)


def test_matches_naive_loop_oracle():
    p = make_params(8, 2, 3)
    table = np.random.default_rng(4).normal(size=(32, 2))
    x = np.random.default_rng(5).normal(size=(5, 8))
    out, _ = compute_attention(Tensor(x), p, RelativeBias(Tensor(table)))
    ref = naive_attention(x, p, table, t5_bucket)
    assert np.abs(out.data - ref).max() < 1e-10


def test_rows_sum_to_one_and_one_softmax_per_head():
    p = make_params(12, 3, 6)
    x = Tensor(np.random.default_rng(7).normal(size=(9, 12)))
    before = counters().softmax_nn
    _, cache = compute_attention(x, p, RelativeBias(Tensor(np.random.default_rng(8).normal(size=(32, 3)))))
    assert counters().softmax_nn - before == 3
    np.testing.assert_allclose(cache.probs.data.sum(axis=-1), 1.0, atol=1e-9)


def test_compute_is_deterministic():
    p = make_params(8, 2, 9)
    x = Tensor(np.random.default_rng(10).normal(size=(7, 8)))
    a, ca = compute_attention(x, p)
    b, cb = compute_attention(x, p)
    assert np.array_equal(a.data, b.data) and np.array_equal(ca.probs.data, cb.probs.data)


def test_compute_errors():
    with pytest.raises(ConfigError):
        compute_attention(Tensor(np.ones((2, 4))), make_params(4, 1, 0, computing=False))
    with pytest.raises(LengthError):
        compute_attention(Tensor(np.ones((5, 4))), make_params(4, 1, 0), max_seq_len=4)


def test_params_need_both_or_neither_query_key():
    p = make_params(4, 1, 0)
    with pytest.raises(ConfigError):
        AttentionParams(p.wv, p.bv, p.wo, p.bo, 1, wq=p.wq, bq=p.bq)
    with pytest.raises(ConfigError):
        AttentionParams(p.wv, p.bv, p.wo, p.bo, 3)


def test_cache_is_read_only():
    _, cache = compute_attention(Tensor(np.ones((3, 4))), make_params(4, 2, 0))
    with pytest.raises(ValueError):
        cache.probs.data[0, 0, 0] = 2.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_permutation_equivariance_without_bias(seed, n):
    p = make_params(8, 2, seed)
    x = np.random.default_rng(seed).normal(size=(n, 8))
    perm = np.random.default_rng(seed + 1).permutation(n)
    bias = RelativeBias(Tensor(np.zeros((32, 2))))
    out, _ = compute_attention(Tensor(x), p, bias)
    out_perm, _ = compute_attention(Tensor(x[perm]), p, bias)
    np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-12)


# reuse_attention


def _cache(probs):
    return AttentionCache(Tensor(probs), probs.shape[1])


def test_reuse_identity_cache_passes_values_through():
    p = make_params(8, 2, 11, computing=False)
    x = Tensor(np.random.default_rng(12).normal(size=(4, 8)))
    out = reuse_attention(x, p, _cache(np.stack([np.eye(4)] * 2)))
    expect = (x.data @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out.data, expect, atol=1e-12)


def test_reuse_uniform_cache_averages_values():
    p = make_params(8, 2, 13, computing=False)
    x = Tensor(np.random.default_rng(14).normal(size=(5, 8)))
    out = reuse_attention(x, p, _cache(np.full((2, 5, 5), 0.2)))
    v = x.data @ p.wv.data + p.bv.data
    expect = v.mean(axis=0) @ p.wo.data + p.bo.data
    np.testing.assert_allclose(out.data, np.tile(expect, (5, 1)), atol=1e-12)


def test_reuse_of_computed_cache_matches_compute():
    comp = make_params(8, 2, 15)
    x = Tensor(np.random.default_rng(16).normal(size=(6, 8)))
    out, cache = compute_attention(x, comp, RelativeBias(Tensor(np.random.default_rng(17).normal(size=(32, 2)))))
    reuse = AttentionParams(comp.wv, comp.bv, comp.wo, comp.bo, 2)
    assert np.abs(reuse_attention(x, reuse, cache).data - out.data).max() < 1e-10


def test_reuse_never_runs_softmax():
    _, cache = compute_attention(Tensor(np.ones((3, 4))), make_params(4, 2, 0))
    before = counters().softmax_nn
    reuse_attention(Tensor(np.ones((3, 4))), make_params(4, 2, 1, computing=False), cache)
    assert counters().softmax_nn == before


def test_reuse_errors():
    _, cache = compute_attention(Tensor(np.ones((3, 4))), make_params(4, 2, 0))
    with pytest.raises(ConfigError):
        reuse_attention(Tensor(np.ones((3, 4))), make_params(4, 2, 0), cache)
    with pytest.raises(CacheError):
        reuse_attention(Tensor(np.ones((4, 4))), make_params(4, 2, 0, computing=False), cache)
    with pytest.raises(CacheError):
        reuse_attention(Tensor(np.ones((3, 4))), make_params(4, 1, 0, computing=False), cache)


def test_gradient_through_cache_and_values():
    comp = make_params(8, 2, 18)
    reuse = make_params(8, 2, 19, computing=False)
    bias = RelativeBias(Tensor(np.random.default_rng(20).normal(size=(32, 2)), requires_grad=True))
    x = Tensor(np.random.default_rng(21).normal(size=(5, 8)), requires_grad=True)
    w = Tensor(np.random.default_rng(22).normal(size=(5, 8)))

    def loss():
        _, cache = compute_attention(x, comp, bias)
        return tensor_sum(mul(reuse_attention(x, reuse, cache), w))

    loss().backward()
    checked = [x, bias.table, comp.wq, comp.bq, comp.wk, reuse.wv, reuse.wo, reuse.bv]
    for t in checked:
        assert relative_error(t.grad, numeric_grad(lambda: loss().item(), t)) < 1e-4
    # the compute output is discarded, so the computing layer's wv gets no gradient
    assert comp.wv.grad is None or not np.any(comp.wv.grad)
    assert np.linalg.norm(comp.wq.grad) > 0


def test_attention_dropout_only_in_training():
    p = make_params(8, 2, 23)
    x = Tensor(np.random.default_rng(24).normal(size=(6, 8)))
    plain, cache = compute_attention(x, p)
    evald, _ = compute_attention(x, p, dropout_policy=DropoutPolicy(0.1, training=False))
    assert np.array_equal(plain.data, evald.data)
    trained, tcache = compute_attention(x, p, dropout_policy=DropoutPolicy(0.5, True), rng=np.random.default_rng(0))
    assert not np.array_equal(plain.data, trained.data)
    # the cache keeps the pre-dropout distribution
    assert np.array_equal(cache.probs.data, tcache.probs.data)
    with pytest.raises(ConfigError):
        compute_attention(x, p, dropout_policy=DropoutPolicy(0.5, True))
