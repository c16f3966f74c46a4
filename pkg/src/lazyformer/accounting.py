"""Analytic parameter and FLOP accounting for LazyFormer configurations.

FLOPs count a multiply-add as two operations. Softmax costs
``SOFTMAX_FLOPS_PER_ENTRY`` per attention entry. Elementwise work such as
layer norm, GELU and residual adds is not counted; the tensor engine's
instrumentation follows the same convention, so the two agree exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .attention import SOFTMAX_FLOPS_PER_ENTRY
from .model import Layout, ModelConfig

PARAM_GROUPS = ("embeddings", "attention", "ffn", "norms", "head")
WIDTH_MULTIPLE = 64


@dataclass
class CostReport:
    """Parameter counts by group plus a FLOP breakdown at ``seq_len``."""

    config: ModelConfig = field(repr=False)
    seq_len: int
    params_by_group: dict
    qk_flops: int
    softmax_flops: int
    attention_flops_compute: int
    attention_flops_reuse: int
    ffn_flops: int
    head_flops: int

    @property
    def total_params(self) -> int:
        return sum(self.params_by_group.values())

    @property
    def total_flops(self) -> int:
        return self.attention_flops_compute + self.attention_flops_reuse + self.ffn_flops + self.head_flops

    def at(self, n: int) -> "CostReport":
        """The same configuration evaluated at sequence length ``n``."""
        return flop_model(self.config, n)

    def total_flops_at(self, n: int) -> int:
        return self.at(n).total_flops

    def records(self) -> list[dict]:
        c = self.config
        base = {"layout": str(c.layout), "W": c.ffn_width, "H": c.embed_dim, "N": c.num_heads}
        out = [{**base, "kind": "params", "group": g, "value": self.params_by_group[g]} for g in PARAM_GROUPS]
        for group, value in (
            ("attention_compute", self.attention_flops_compute),
            ("attention_reuse", self.attention_flops_reuse),
            ("ffn", self.ffn_flops),
            ("head", self.head_flops),
        ):
            out.append({**base, "kind": "flops", "group": group, "seq_len": self.seq_len, "value": value})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_table(self) -> str:
        c = self.config
        lines = [
            f"layout {c.layout}  (W,H,N)=({c.ffn_width},{c.embed_dim},{c.num_heads})  "
            f"vocab={c.vocab_size}  max_len={c.max_seq_len}",
            f"{'group':<20}{'params':>16}",
        ]
        for g in PARAM_GROUPS:
            lines.append(f"{g:<20}{self.params_by_group[g]:>16,}")
        lines.append(f"{'total':<20}{self.total_params:>16,}  ({self.total_params / 1e6:.2f}M)")
        lines.append(f"FLOPs at n={self.seq_len}:")
        for name, value in (
            ("attention (compute)", self.attention_flops_compute),
            ("attention (reuse)", self.attention_flops_reuse),
            ("feed-forward", self.ffn_flops),
            ("MLM head", self.head_flops),
            ("total", self.total_flops),
        ):
            lines.append(f"  {name:<18}{value:>18,}")
        return "\n".join(lines)


def _param_groups(config: ModelConfig) -> dict:
    H, W, V = config.embed_dim, config.ffn_width, config.vocab_size
    k, b = config.layout.num_layers, config.layout.num_blocks
    return {
        "embeddings": V * H + config.max_seq_len * H,
        "attention": config.num_rel_buckets * config.num_heads + b * (4 * H * H + 4 * H) + (k - b) * (2 * H * H + 2 * H),
        "ffn": k * (2 * H * W + W + H),
        "norms": 2 * H + k * 4 * H,
        "head": V,
    }


def flop_model(config: ModelConfig, n: int) -> CostReport:
    """Forward-pass FLOPs for one sequence of length ``n``."""
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    H, W, N, V = config.embed_dim, config.ffn_width, config.num_heads, config.vocab_size
    k, b = config.layout.num_layers, config.layout.num_blocks
    qk = 2 * n * n * H
    softmax = SOFTMAX_FLOPS_PER_ENTRY * n * n * N
    av = 2 * n * n * H
    projection = 2 * n * H * H
    return CostReport(
        config=config,
        seq_len=n,
        params_by_group=_param_groups(config),
        qk_flops=b * qk,
        softmax_flops=b * softmax,
        attention_flops_compute=b * (4 * projection + qk + softmax + av),
        attention_flops_reuse=(k - b) * (2 * projection + av),
        ffn_flops=k * 4 * n * H * W,
        head_flops=2 * n * H * V,
    )


def count_params(config: ModelConfig) -> CostReport:
    """Exact parameter count (FLOP fields evaluated at ``max_seq_len``)."""
    return flop_model(config, config.max_seq_len)


def compensated_width(base_width: int, embed_dim: int, num_layers: int, layout: Layout) -> int:
    """FFN width that restores the query/key parameters a layout drops.

    Each of the ``k - b`` reusing layers loses ``2 H^2`` weights; spreading
    them over ``k`` feed-forward layers of ``2 H`` weights per unit of width
    gives ``(k - b) H / k`` extra units, rounded to a multiple of 64.
    """
    b = layout.num_blocks
    if b > num_layers:
        raise ValueError(f"layout has {b} blocks but only {num_layers} layers")
    extra = (num_layers - b) * embed_dim / num_layers
    return base_width + WIDTH_MULTIPLE * int(extra / WIDTH_MULTIPLE + 0.5)


def predicted_speedup(baseline: ModelConfig, variant: ModelConfig, n: int) -> float:
    """Ratio of forward FLOPs, baseline over variant, at length ``n``."""
    return flop_model(baseline, n).total_flops / flop_model(variant, n).total_flops
