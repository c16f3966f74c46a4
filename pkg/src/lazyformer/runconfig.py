"""Sectioned key=value run configuration for ``lazyformer train``.

Unknown sections or keys are rejected, and every input path is checked
before any model is built.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig, parse_layout

RESOURCES = resources.files("lazyformer") / "resources"
BUNDLED_CORPUS = RESOURCES / "synthetic_corpus.txt"
BUNDLED_VOCAB = RESOURCES / "synthetic_vocab.txt"


@dataclass
class ModelSection:
    layout: str = "M1x4"
    ffn_width: int = 512
    embed_dim: int = 128
    num_heads: int = 4
    max_seq_len: int = 64
    attention_dropout: bool = False
    hidden_dropout_p: float = 0.1
    num_rel_buckets: int = 32
    rel_max_distance: int = 128


@dataclass
class TrainingSection:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 8
    seq_len: int = 64
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    mask_prob: float = 0.15
    checkpoint_every: int = 0
    corpus: str = ""  # empty: bundled synthetic corpus
    vocab: str = ""


@dataclass
class OutputSection:
    log: str = "train_log.csv"
    checkpoint_dir: str = "checkpoints"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    output: OutputSection = field(default_factory=OutputSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def corpus_path(self) -> Path:
        return self._resolve(self.training.corpus) if self.training.corpus else Path(str(BUNDLED_CORPUS))

    def vocab_path(self) -> Path:
        return self._resolve(self.training.vocab) if self.training.vocab else Path(str(BUNDLED_VOCAB))

    def log_path(self) -> Path:
        return self._resolve(self.output.log)

    def checkpoint_dir(self) -> Path:
        return self._resolve(self.output.checkpoint_dir)

    def _resolve(self, p: str) -> Path:
        path = Path(p).expanduser()
        return path if path.is_absolute() else self.base_dir / path

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            ffn_width=m.ffn_width,
            embed_dim=m.embed_dim,
            num_heads=m.num_heads,
            vocab_size=vocab_size,
            max_seq_len=m.max_seq_len,
            layout=m.layout,
            attention_dropout=m.attention_dropout,
            hidden_dropout_p=m.hidden_dropout_p,
            num_rel_buckets=m.num_rel_buckets,
            rel_max_distance=m.rel_max_distance,
        )

    def validate(self):
        """Check everything that can fail before training starts."""
        parse_layout(self.model.layout)
        t = self.training
        if t.steps < 1 or t.batch_size < 1:
            raise ConfigError("training.steps and training.batch_size must be positive")
        if not 1 <= t.seq_len <= self.model.max_seq_len:
            raise ConfigError(f"training.seq_len {t.seq_len} must lie in [1, model.max_seq_len={self.model.max_seq_len}]")
        if t.peak_lr <= 0 or not 0 < t.warmup_ratio < 1:
            raise ConfigError("need training.peak_lr > 0 and 0 < training.warmup_ratio < 1")
        for label, path in (("corpus", self.corpus_path()), ("vocab", self.vocab_path())):
            if not path.is_file():
                raise ConfigError(f"{label} file not found: {path}")
        for label, path in (("log", self.log_path().parent), ("checkpoint_dir", self.checkpoint_dir().parent)):
            if not path.is_dir():
                raise ConfigError(f"output.{label}: parent directory does not exist: {path}")


_SECTIONS = {"model": ModelSection, "training": TrainingSection, "output": OutputSection}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def set_option(cfg: RunConfig, section: str, key: str, raw: str):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}] (allowed: {', '.join(_SECTIONS)})")
    target = getattr(cfg, section)
    kinds = {f.name: type(f.default) for f in fields(target)}
    if key not in kinds:
        raise ConfigError(f"unknown key {key!r} in [{section}] (allowed: {', '.join(kinds)})")
    setattr(target, key, _convert(section, key, raw, kinds[key]))


def load_run_config(path=None) -> RunConfig:
    """Defaults, overlaid with the file at ``path`` when given. Relative paths resolve against the file."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = RunConfig(base_dir=path.resolve().parent)
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_option(cfg, section, key, raw)
    return cfg
