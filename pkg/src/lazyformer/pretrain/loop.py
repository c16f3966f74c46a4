"""Masked-LM training step and loop with CSV logging and checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import write_checkpoint
from ..errors import NonFiniteError, TrainingDivergedError
from ..model import LazyFormer, forward
from ..tensor import IGNORE_INDEX, cross_entropy, no_grad, scale
from .data import Batch, MaskingPolicy, make_batch
from .optim import LrSchedule, OptimizerState, adam_update, lr_at

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "lr", "wall_ms")


def mlm_loss(model: LazyFormer, batch: Batch, mode: str = "train", rng=None):
    """Mean cross-entropy over all labelled positions in the batch."""
    count = int((batch.labels != IGNORE_INDEX).sum())
    total = None
    for inputs, labels in zip(batch.inputs, batch.labels):
        logits, _ = forward(model, inputs, mode, rng)
        term = cross_entropy(logits, labels, reduction="sum")
        total = term if total is None else total + term
    return scale(total, 1.0 / max(count, 1))


def train_step(model: LazyFormer, batch: Batch, opt: OptimizerState, sched: LrSchedule, rng) -> float:
    """Forward, backward, clip, Adam update. Returns the batch loss before the update."""
    params = model.named_parameters()
    model.zero_grad()
    try:
        loss = mlm_loss(model, batch, "train", rng)
        loss.backward()
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"training aborted at step {opt.step + 1}: {exc}") from exc
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingDivergedError(f"training aborted at step {opt.step + 1}: loss is {value}")
    for name, t in params:
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise TrainingDivergedError(f"training aborted at step {opt.step + 1}: gradient of {name} is non-finite")
    adam_update(params, opt, lr_at(opt.step + 1, sched))
    return value


@dataclass
class LogRow:
    step: int
    loss: float
    lr: float
    wall_ms: float


def train(
    model: LazyFormer,
    windows: np.ndarray,
    *,
    steps: int,
    batch_size: int,
    sched: LrSchedule,
    policy: MaskingPolicy,
    seed: int = 0,
    opt: OptimizerState | None = None,
    log_path=None,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> list[LogRow]:
    """Run ``steps`` updates. Batches and dropout depend only on ``(seed, step)``."""
    opt = opt or OptimizerState()
    rows = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    try:
        for i in range(steps):
            step = opt.step + 1
            batch = make_batch(windows, step, batch_size, seed, policy)
            lr = lr_at(step, sched)
            start = time.perf_counter()
            loss = train_step(model, batch, opt, sched, np.random.default_rng([seed, step, 1]))
            wall_ms = (time.perf_counter() - start) * 1e3
            row = LogRow(step, loss, lr, wall_ms)
            rows.append(row)
            if writer is not None:
                writer.writerow([step, repr(loss), repr(lr), f"{wall_ms:.3f}"])
            if step % 50 == 0:
                log.info("step %d loss %.4f lr %.2e", step, loss, lr)
            if checkpoint_dir is not None and (
                (checkpoint_every and step % checkpoint_every == 0) or i == steps - 1
            ):
                write_checkpoint(model, Path(checkpoint_dir) / f"step_{step:07d}.lzyf")
    finally:
        if log_file is not None:
            log_file.close()
    return rows


def evaluate_loss(model: LazyFormer, windows: np.ndarray, policy: MaskingPolicy, seed: int = 0, batches: int = 4, batch_size: int = 8) -> float:
    """Eval-mode MLM loss on a fixed set of corrupted batches."""
    with no_grad():
        losses = [mlm_loss(model, make_batch(windows, 10_000_000 + b, batch_size, seed, policy), "eval").item() for b in range(batches)]
    return float(np.mean(losses))
