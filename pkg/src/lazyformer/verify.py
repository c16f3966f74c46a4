"""Fast self-check of the core invariants, used by ``lazyformer verify``.

Every property is deterministic and runs in well under a minute in total.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import numeric_grad, relative_error
from .model import ModelConfig, build_model, encode, forward
from .pretrain.data import MaskingPolicy, apply_masking
from .pretrain.optim import LrSchedule, lr_at
from .reference import standard_transformer_logits
from .tensor import cross_entropy

_TINY = dict(ffn_width=24, embed_dim=12, num_heads=3, vocab_size=29, max_seq_len=16)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _tokens(seed, n, vocab):
    return np.random.default_rng(seed).integers(0, vocab, size=n)


def degenerate_equivalence(seed=0):
    """M1xk matches an independent plain-numpy transformer."""
    config = ModelConfig(layout="M1x3", **_TINY)
    model = build_model(config, seed)
    ids = _tokens(seed, 11, config.vocab_size)
    ours, _ = forward(model, ids)
    ref = standard_transformer_logits(dict((k, t.data) for k, t in model.named_parameters()), config, ids)
    diff = float(np.abs(ours.data - ref).max())
    return diff <= 1e-10, f"max |diff| = {diff:.2e} (tol 1e-10)"


def lazy_count_law(seed=0):
    """Attention is computed once per block: b computations and b*N softmax calls."""
    problems = []
    for spec, blocks in (("M2x3", 3), ("M3M1M2", 3), ("M4x1", 1), ("M1x4", 4)):
        config = ModelConfig(layout=spec, **_TINY)
        _, stats = forward(build_model(config, seed), _tokens(seed, 9, config.vocab_size))
        if stats.attention_computations != blocks or stats.softmax_nn_calls != blocks * config.num_heads:
            problems.append(f"{spec}: {stats.attention_computations} computations, {stats.softmax_nn_calls} softmax calls")
    if problems:
        return False, "; ".join(problems)
    return True, "4 layouts, computations == blocks, softmax calls == blocks x heads"


def gradient_check(seed=0):
    """Backprop matches central differences on a 2-layer lazy model."""
    config = ModelConfig(layout="M2x1", ffn_width=8, embed_dim=6, num_heads=2, vocab_size=11, max_seq_len=8)
    model = build_model(config, seed)
    ids = _tokens(seed, 5, config.vocab_size)
    labels = _tokens(seed + 1, 5, config.vocab_size)
    labels[1] = -1

    def loss_fn():
        logits, _ = forward(model, ids)
        return cross_entropy(logits, labels)

    model.zero_grad()
    loss_fn().backward()
    worst, worst_name = 0.0, ""
    for name, t in model.named_parameters():
        err = relative_error(t.grad, numeric_grad(lambda: loss_fn().item(), t))
        if err > worst:
            worst, worst_name = err, name
    return worst < 1e-4, f"worst relative error {worst:.1e} at {worst_name} (tol 1e-4)"


def masking_statistics(seed=0):
    """Selection and replacement fractions stay within binomial bounds."""
    policy = MaskingPolicy(vocab_size=1000)
    tokens = np.random.default_rng(seed).integers(4, 1000, size=100_000)
    corrupted, labels = apply_masking(tokens, policy, np.random.default_rng(seed + 1))
    selected = labels != -1
    frac = selected.mean()
    n_sel = selected.sum()
    masked = (corrupted[selected] == policy.mask_token_id).mean()
    kept = (corrupted[selected] == tokens[selected]).mean()
    rand = 1.0 - masked - kept
    ok = abs(frac - 0.15) <= 0.01 and abs(masked - 0.8) <= 0.02 and abs(rand - 0.1) <= 0.02 and abs(kept - 0.1) <= 0.02
    return ok, f"selected {frac:.4f} of 1e5; mask/random/keep {masked:.3f}/{rand:.3f}/{kept:.3f} over {n_sel}"


def schedule_endpoints(seed=0):
    sched = LrSchedule(1e-4, 10_000, 1_000_000)
    values = (lr_at(0, sched), lr_at(10_000, sched), lr_at(1_000_000, sched), lr_at(505_000, sched))
    ok = values[0] == 0.0 and values[1] == 1e-4 and values[2] == 0.0 and abs(values[3] - 5e-5) < 1e-18
    return ok, "lr(0)=%g lr(warmup)=%g lr(max)=%g lr(505k)=%g" % values


def cache_identity(seed=0):
    """Every layer of a block consumes the very distribution its first layer produced."""
    config = ModelConfig(layout="M3M2", **_TINY)
    _, stats = encode(build_model(config, seed), _tokens(seed, 7, config.vocab_size), keep_caches=True)
    owners = [0, 0, 0, 1, 1]
    ok = len(stats.layer_caches) == 5 and all(stats.layer_caches[i] is stats.block_caches[b] for i, b in enumerate(owners))
    return ok, f"{len(stats.block_caches)} caches shared by {len(stats.layer_caches)} layers"


def checkpoint_round_trip(seed=0):
    config = ModelConfig(layout="M2M1", **_TINY)
    model = build_model(config, seed)
    ids = _tokens(seed, 8, config.vocab_size)
    before, _ = forward(model, ids)
    after, _ = forward(load_checkpoint(save_checkpoint(model)), ids)
    ok = np.array_equal(before.data, after.data)
    return ok, "logits bitwise identical after save/load" if ok else "logits differ after save/load"


PROPERTIES: list[tuple[str, Callable]] = [
    ("degenerate-layout equivalence", degenerate_equivalence),
    ("lazy-count law", lazy_count_law),
    ("gradient check (2-layer)", gradient_check),
    ("masking statistics", masking_statistics),
    ("lr schedule endpoints", schedule_endpoints),
    ("cache identity", cache_identity),
    ("checkpoint round trip", checkpoint_round_trip),
]


def run_verify(seed: int = 0) -> list[PropertyResult]:
    results = []
    for name, check in PROPERTIES:
        try:
            passed, detail = check(seed)
        except Exception as exc:  # a crash is a failure of that property, not of the suite
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(PropertyResult(name, bool(passed), detail))
    return results
