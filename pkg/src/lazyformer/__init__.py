"""LazyFormer: a transformer encoder that computes self-attention once per lazy block."""

from .attention import AttentionCache, AttentionParams, RelativeBias, compute_attention, relative_bucket, reuse_attention
from .model import Layout, LazyFormer, ModelConfig, build_model, encode, forward, parse_layout
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionCache",
    "AttentionParams",
    "Layout",
    "LazyFormer",
    "ModelConfig",
    "RelativeBias",
    "Tensor",
    "backward",
    "build_model",
    "compute_attention",
    "encode",
    "forward",
    "no_grad",
    "parse_layout",
    "relative_bucket",
    "reuse_attention",
]
