"""LazyFormer encoder: layouts, lazy blocks, and the forward pass.

A layout lists block sizes bottom-up. The first layer of every block owns
the query/key projections and computes the block's attention distribution
from the block input; the remaining layers of the block reuse it.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    AttentionCache,
    AttentionParams,
    DropoutPolicy,
    RelativeBias,
    compute_attention,
    reuse_attention,
)
from .errors import ConfigError, LayoutError
from .tensor import Tensor, add, counters, dropout, embedding, gelu, layer_norm, matmul
from .validation import check_token_ids

INIT_STD = 0.02
LAYER_NORM_EPS = 1e-12

# Test-only mutation hook for the verifier: set to "recompute-attention" to
# make reusing layers recompute attention instead of reading the cache.
FAULT_ENV = "LAZYFORMER_FAULT"


@dataclass(frozen=True)
class Layout:
    """Lazy-block sizes, lowest block first."""

    block_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.block_sizes)
        if not sizes or any(m < 1 for m in sizes):
            raise LayoutError(f"block sizes must be positive and non-empty, got {list(sizes)}")
        object.__setattr__(self, "block_sizes", sizes)

    @classmethod
    def uniform(cls, block_size: int, num_blocks: int) -> "Layout":
        return cls((block_size,) * num_blocks)

    @property
    def num_layers(self) -> int:
        return sum(self.block_sizes)

    @property
    def num_blocks(self) -> int:
        return len(self.block_sizes)

    def __str__(self):
        sizes = self.block_sizes
        if len(set(sizes)) == 1:
            return f"M{sizes[0]}x{len(sizes)}"
        return "".join(f"M{m}" for m in sizes)


LAYOUT_GRAMMAR = "M<layers per block>x<blocks> (e.g. M2x6) or M<m1>M<m2>... listed lowest block first (e.g. M5M3M2M2)"


def parse_layout(spec: str) -> Layout:
    """Parse ``M2x6`` (six blocks of two) or ``M5M3M2M2`` (bottom-up sizes)."""
    if not isinstance(spec, str):
        raise LayoutError(f"layout must be a string, got {type(spec).__name__}")
    text = spec.strip()
    if not text:
        raise LayoutError("empty layout; expected " + LAYOUT_GRAMMAR, spec, 0)
    pos = 0

    def read_int():
        nonlocal pos
        start = pos
        while pos < len(text) and text[pos].isdigit():
            pos += 1
        if start == pos:
            raise LayoutError("expected a number; grammar is " + LAYOUT_GRAMMAR, spec, start)
        value = int(text[start:pos])
        if value == 0:
            raise LayoutError("values must be positive; grammar is " + LAYOUT_GRAMMAR, spec, start)
        return value

    sizes = []
    while pos < len(text):
        if text[pos] != "M":
            raise LayoutError("expected 'M'; grammar is " + LAYOUT_GRAMMAR, spec, pos)
        pos += 1
        size = read_int()
        if pos < len(text) and text[pos] == "x":
            if sizes:
                raise LayoutError("repeat form M<m>x<b> cannot follow other blocks", spec, pos)
            pos += 1
            count = read_int()
            if pos != len(text):
                raise LayoutError("unexpected trailing characters", spec, pos)
            return Layout.uniform(size, count)
        sizes.append(size)
    return Layout(tuple(sizes))


@dataclass
class ModelConfig:
    """Architecture hyperparameters, named as in the (W, H, N) convention.

    ``ffn_width`` is W, ``embed_dim`` is H and ``num_heads`` is N. Attention
    dropout, when enabled, uses ``hidden_dropout_p``.
    """

    ffn_width: int
    embed_dim: int
    num_heads: int
    vocab_size: int
    max_seq_len: int
    layout: Layout = field(default_factory=lambda: Layout.uniform(1, 12))
    attention_dropout: bool = False
    hidden_dropout_p: float = 0.1
    num_rel_buckets: int = 32
    rel_max_distance: int = 128

    def __post_init__(self):
        if isinstance(self.layout, str):
            self.layout = parse_layout(self.layout)
        elif isinstance(self.layout, (list, tuple)):
            self.layout = Layout(tuple(self.layout))
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.ffn_width < self.embed_dim:
            raise ConfigError(f"ffn_width {self.ffn_width} must be >= embed_dim {self.embed_dim}")
        if self.vocab_size < 1 or self.max_seq_len < 1:
            raise ConfigError("vocab_size and max_seq_len must be positive")
        if not 0.0 <= self.hidden_dropout_p < 1.0:
            raise ConfigError(f"hidden_dropout_p must be in [0, 1), got {self.hidden_dropout_p}")
        if self.num_rel_buckets < 2 or self.rel_max_distance <= self.num_rel_buckets:
            raise ConfigError("need num_rel_buckets >= 2 and rel_max_distance > num_rel_buckets")

    @property
    def num_layers(self) -> int:
        return self.layout.num_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = str(self.layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class TransformerLayer:
    """Post-norm layer: attention, add & norm, GELU feed-forward, add & norm."""

    attention: AttentionParams
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    @property
    def is_computing(self) -> bool:
        return self.attention.is_computing

    def named_tensors(self):
        out = [(f"attention.{name}", t) for name, t in self.attention.tensors()]
        out += [("ffn.w_in", self.w_in), ("ffn.b_in", self.b_in), ("ffn.w_out", self.w_out), ("ffn.b_out", self.b_out)]
        out += [
            ("norm1.gain", self.norm1_gain),
            ("norm1.bias", self.norm1_bias),
            ("norm2.gain", self.norm2_gain),
            ("norm2.bias", self.norm2_bias),
        ]
        return out

    def feed_forward(self, x):
        hidden = gelu(add(matmul(x, self.w_in), self.b_in))
        return add(matmul(hidden, self.w_out), self.b_out)


@dataclass
class LazyBlock:
    layers: list[TransformerLayer]

    def __post_init__(self):
        if not self.layers[0].is_computing or any(layer.is_computing for layer in self.layers[1:]):
            raise ConfigError("a lazy block needs exactly one computing layer, in first position")

    @property
    def first_layer(self) -> TransformerLayer:
        return self.layers[0]

    @property
    def rest(self) -> list[TransformerLayer]:
        return self.layers[1:]


def _param(shape, name, rng, fill=None):
    if fill is None:
        data = rng.normal(0.0, INIT_STD, size=shape)
    else:
        data = np.full(shape, float(fill))
    return Tensor(data, requires_grad=True, name=name)


class LazyFormer:
    """Encoder with tied-embedding masked-LM head.

    Use :func:`build_model` for a randomly initialised instance; the
    constructor with ``rng=None`` gives zero weights (norm gains at 1), which
    checkpoint loading then overwrites.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None):
        self.config = config
        H, W, N, V = config.embed_dim, config.ffn_width, config.num_heads, config.vocab_size

        def weight(shape, name):
            return _param(shape, name, rng, fill=0.0 if rng is None else None)

        def const(shape, name, value):
            return _param(shape, name, rng, fill=value)

        self.token_embedding = weight((V, H), "embeddings.token")
        self.position_embedding = weight((config.max_seq_len, H), "embeddings.position")
        self.embed_norm_gain = const((H,), "embeddings.norm.gain", 1.0)
        self.embed_norm_bias = const((H,), "embeddings.norm.bias", 0.0)
        self.relative_bias = RelativeBias(
            weight((config.num_rel_buckets, N), "attention.relative_bias"),
            config.num_rel_buckets,
            config.rel_max_distance,
        )
        self.blocks = []
        for b, size in enumerate(config.layout.block_sizes):
            layers = []
            for j in range(size):
                prefix = f"blocks.{b}.layers.{j}"
                qk = {}
                if j == 0:
                    qk = dict(
                        wq=weight((H, H), f"{prefix}.attention.wq"),
                        bq=const((H,), f"{prefix}.attention.bq", 0.0),
                        wk=weight((H, H), f"{prefix}.attention.wk"),
                        bk=const((H,), f"{prefix}.attention.bk", 0.0),
                    )
                attn = AttentionParams(
                    wv=weight((H, H), f"{prefix}.attention.wv"),
                    bv=const((H,), f"{prefix}.attention.bv", 0.0),
                    wo=weight((H, H), f"{prefix}.attention.wo"),
                    bo=const((H,), f"{prefix}.attention.bo", 0.0),
                    num_heads=N,
                    **qk,
                )
                layers.append(
                    TransformerLayer(
                        attention=attn,
                        w_in=weight((H, W), f"{prefix}.ffn.w_in"),
                        b_in=const((W,), f"{prefix}.ffn.b_in", 0.0),
                        w_out=weight((W, H), f"{prefix}.ffn.w_out"),
                        b_out=const((H,), f"{prefix}.ffn.b_out", 0.0),
                        norm1_gain=const((H,), f"{prefix}.norm1.gain", 1.0),
                        norm1_bias=const((H,), f"{prefix}.norm1.bias", 0.0),
                        norm2_gain=const((H,), f"{prefix}.norm2.gain", 1.0),
                        norm2_bias=const((H,), f"{prefix}.norm2.bias", 0.0),
                    )
                )
            self.blocks.append(LazyBlock(layers))
        self.head_bias = const((V,), "head.bias", 0.0)

    @property
    def layers(self) -> list[TransformerLayer]:
        return [layer for block in self.blocks for layer in block.layers]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in declaration (and checkpoint) order."""
        out = [
            ("embeddings.token", self.token_embedding),
            ("embeddings.position", self.position_embedding),
            ("embeddings.norm.gain", self.embed_norm_gain),
            ("embeddings.norm.bias", self.embed_norm_bias),
            ("attention.relative_bias", self.relative_bias.table),
        ]
        for b, block in enumerate(self.blocks):
            for j, layer in enumerate(block.layers):
                out += [(f"blocks.{b}.layers.{j}.{name}", t) for name, t in layer.named_tensors()]
        out.append(("head.bias", self.head_bias))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def __repr__(self):
        c = self.config
        return (
            f"LazyFormer(layout={c.layout}, W={c.ffn_width}, H={c.embed_dim}, N={c.num_heads}, "
            f"params={self.num_parameters():,})"
        )


def build_model(config: ModelConfig, rng=0) -> LazyFormer:
    """Randomly initialised model: weights ~ N(0, 0.02^2), biases 0, norm gains 1."""
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(config).__name__}")
    return LazyFormer(config, np.random.default_rng(rng))


@dataclass
class ForwardStats:
    attention_computations: int = 0
    softmax_nn_calls: int = 0
    flops: int = 0
    block_caches: list[AttentionCache] = field(default_factory=list, repr=False)
    # the cache each layer produced or consumed, bottom-up
    layer_caches: list[AttentionCache] = field(default_factory=list, repr=False)


def encode(model: LazyFormer, token_ids, mode: str = "eval", rng=None, keep_caches: bool = False):
    """Run embeddings and all lazy blocks; returns ``(hidden [n x H], stats)``.

    ``keep_caches`` retains every block's attention distribution in the stats
    (memory grows by one [heads x n x n] array per block).
    """
    config = model.config
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids = check_token_ids(token_ids, config.vocab_size, config.max_seq_len)
    n = ids.shape[0]
    training = mode == "train"
    if training and rng is None:
        raise ConfigError("train mode needs a random generator for dropout")
    hidden_p = config.hidden_dropout_p if training else 0.0
    attn_policy = DropoutPolicy(config.hidden_dropout_p if config.attention_dropout else 0.0, training)
    fault = os.environ.get(FAULT_ENV, "")

    ops = counters()
    flops0, softmax0 = ops.snapshot()
    stats = ForwardStats()

    x = add(embedding(model.token_embedding, ids), embedding(model.position_embedding, np.arange(n)))
    x = layer_norm(x, model.embed_norm_gain, model.embed_norm_bias, LAYER_NORM_EPS)
    x = dropout(x, hidden_p, rng)
    bias = model.relative_bias.matrix(n)

    for block in model.blocks:
        first = block.first_layer
        attn, cache = compute_attention(x, first.attention, bias, attn_policy, rng, config.max_seq_len)
        stats.attention_computations += 1
        if keep_caches:
            stats.block_caches.append(cache)
            stats.layer_caches.append(cache)
        x = _finish_layer(first, x, attn, hidden_p, rng)
        for layer in block.rest:
            if fault == "recompute-attention":
                attn, _ = compute_attention(x, first.attention, bias, attn_policy, rng)
            else:
                attn = reuse_attention(x, layer.attention, cache, attn_policy, rng)
            if keep_caches:
                stats.layer_caches.append(cache)
            x = _finish_layer(layer, x, attn, hidden_p, rng)

    flops1, softmax1 = ops.snapshot()
    stats.flops = flops1 - flops0
    stats.softmax_nn_calls = softmax1 - softmax0
    return x, stats


def _finish_layer(layer, x, attn, hidden_p, rng):
    x = layer_norm(add(x, dropout(attn, hidden_p, rng)), layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS)
    ff = layer.feed_forward(x)
    return layer_norm(add(x, dropout(ff, hidden_p, rng)), layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS)


def forward(model: LazyFormer, token_ids, mode: str = "eval", rng=None, keep_caches: bool = False):
    """Masked-LM logits ``[n x vocab]`` and :class:`ForwardStats`."""
    hidden, stats = encode(model, token_ids, mode, rng, keep_caches)
    ops = counters()
    before = ops.flops
    logits = add(matmul(hidden, model.token_embedding, transpose_b=True), model.head_bias)
    stats.flops += ops.flops - before
    return logits, stats
