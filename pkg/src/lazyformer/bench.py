"""Wall-clock benchmark of layout variants across sequence lengths.

For every (config, n) cell, warm-up runs are discarded, then ``iters`` timed
runs give a median and a median absolute deviation. All configs see the same
random token ids at a given ``n``. Timed runs at one ``n`` alternate between
configs by default; nothing else runs in the process meanwhile.
"""

from __future__ import annotations

import csv
import gc
import io
import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .accounting import count_params
from .errors import PlanError
from .model import ModelConfig, build_model, forward
from .tensor import cross_entropy, no_grad

MEASURES = ("forward", "forward-backward")
SCHEDULES = ("interleaved", "contiguous")
CSV_COLUMNS = ("label", "n", "median_ms", "mad_ms", "speedup")


def desk_config(layout, seq_len=4096, *, ffn_width=1024, embed_dim=256, num_heads=4, vocab_size=1000, **kw) -> ModelConfig:
    """Desk-scale config for long-sequence runs: (W,H,N) = (1024,256,4), 12 layers."""
    return ModelConfig(
        ffn_width=ffn_width,
        embed_dim=embed_dim,
        num_heads=num_heads,
        vocab_size=vocab_size,
        max_seq_len=seq_len,
        layout=layout,
        **kw,
    )


@dataclass
class BenchPlan:
    configs: list  # (label, ModelConfig) pairs
    seq_lens: list
    iters: int = 5
    warmup_iters: int = 1
    measure: str = "forward"
    mode: str | None = None  # default: eval for forward, train for forward-backward
    baseline: str = "baseline"
    seed: int = 0
    schedule: str = "interleaved"  # or "contiguous": all runs of one cell back to back

    def __post_init__(self):
        if self.iters < 3:
            raise PlanError(f"iters must be >= 3, got {self.iters}")
        if self.warmup_iters < 1:
            raise PlanError(f"warmup_iters must be >= 1, got {self.warmup_iters}")
        if self.measure not in MEASURES:
            raise PlanError(f"measure must be one of {MEASURES}, got {self.measure!r}")
        if self.mode is None:
            self.mode = "eval" if self.measure == "forward" else "train"
        if self.mode not in ("eval", "train"):
            raise PlanError(f"mode must be 'eval' or 'train', got {self.mode!r}")
        if self.schedule not in SCHEDULES:
            raise PlanError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if not self.configs or not self.seq_lens:
            raise PlanError("plan needs at least one config and one sequence length")
        labels = [label for label, _ in self.configs]
        if len(set(labels)) != len(labels):
            raise PlanError(f"duplicate config labels: {labels}")
        if self.baseline not in labels:
            raise PlanError(f"no config labelled {self.baseline!r} (labels: {labels})")
        for label, config in self.configs:
            for n in self.seq_lens:
                if n < 1 or n > config.max_seq_len:
                    raise PlanError(f"n={n} outside [1, {config.max_seq_len}] for config {label!r}")


@dataclass
class BenchCell:
    label: str
    n: int
    median_ms: float
    mad_ms: float
    speedup: float
    config: ModelConfig = field(repr=False)
    samples_ms: list = field(default_factory=list, repr=False)


@dataclass
class BenchResult:
    cells: list
    header: dict = field(default_factory=dict)

    def cell(self, label: str, n: int) -> BenchCell:
        for c in self.cells:
            if c.label == label and c.n == n:
                return c
        raise KeyError((label, n))

    def speedups(self, label: str) -> dict:
        return {c.n: c.speedup for c in self.cells if c.label == label}


def median_mad(samples) -> tuple[float, float]:
    med = statistics.median(samples)
    return med, statistics.median(abs(s - med) for s in samples)


def engine_info(seed: int = 0) -> dict:
    try:
        from threadpoolctl import threadpool_info

        pools = threadpool_info()
        threads = max((p.get("num_threads", 1) for p in pools), default=1)
        blas = ",".join(sorted({p.get("internal_api", "?") for p in pools})) or "unknown"
    except ImportError:  # pragma: no cover
        threads, blas = 1, "unknown"
    return {
        "engine_threads": threads,
        "blas": blas,
        "build": f"python-{platform.python_version()} numpy-{np.__version__} float64",
        "seed": seed,
    }


def _run_once(model, ids, labels, measure, mode, rng) -> float:
    gc.collect()
    gc.disable()
    try:
        start = time.perf_counter()
        if measure == "forward":
            with no_grad():
                forward(model, ids, mode, rng)
        else:
            logits, _ = forward(model, ids, mode, rng)
            cross_entropy(logits, labels).backward()
        elapsed = (time.perf_counter() - start) * 1e3
    finally:
        gc.enable()
    model.zero_grad()
    return elapsed


def run_bench(plan: BenchPlan, progress=None) -> BenchResult:
    """Time every (config, n) cell of the plan. ``progress(label, n, median_ms)`` is optional.

    With the default interleaved schedule the timed runs at each ``n`` go
    round-robin over the configs, so slow drift of the machine (thermal,
    neighbours) lands on every config alike instead of biasing the ratio.
    """
    models = {label: build_model(config, plan.seed) for label, config in plan.configs}
    labels_order = [label for label, _ in plan.configs]
    raw = {}
    for n in plan.seq_lens:
        data_rng = np.random.default_rng([plan.seed, n])
        vocab = min(config.vocab_size for _, config in plan.configs)
        ids = data_rng.integers(0, vocab, size=n)
        labels = data_rng.integers(0, vocab, size=n)
        rngs = {label: np.random.default_rng([plan.seed, n, 1]) for label in labels_order}

        def once(label):
            return _run_once(models[label], ids, labels, plan.measure, plan.mode, rngs[label])

        for label in labels_order:
            for _ in range(plan.warmup_iters):
                once(label)
            raw[label, n] = []
        if plan.schedule == "interleaved":
            for _ in range(plan.iters):
                for label in labels_order:
                    raw[label, n].append(once(label))
        else:
            for label in labels_order:
                raw[label, n] = [once(label) for _ in range(plan.iters)]
        if progress is not None:
            for label in labels_order:
                progress(label, n, statistics.median(raw[label, n]))
    cells = []
    for n in plan.seq_lens:
        base_ms, _ = median_mad(raw[plan.baseline, n])
        for label, config in plan.configs:
            med, mad = median_mad(raw[label, n])
            cells.append(BenchCell(label, n, med, mad, base_ms / med, config, raw[label, n]))
    header = engine_info(plan.seed)
    header.update(measure=plan.measure, mode=plan.mode, iters=plan.iters, warmup=plan.warmup_iters, baseline=plan.baseline, schedule=plan.schedule)
    return BenchResult(cells, header)


def _fmt_params(count: int) -> str:
    return f"{count / 1e6:.1f}M" if count >= 1e5 else f"{count / 1e3:.1f}K"


def emit_report(result: BenchResult, fmt: str = "csv") -> str:
    """CSV (``label,n,median_ms,mad_ms,speedup`` after ``#`` header lines) or markdown tables per n."""
    if not result.cells:
        raise ValueError("empty benchmark result")
    if fmt == "csv":
        buf = io.StringIO()
        for key, value in result.header.items():
            buf.write(f"# {key}={value}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in result.cells:
            writer.writerow([c.label, c.n, f"{c.median_ms:.3f}", f"{c.mad_ms:.3f}", f"{c.speedup:.4f}"])
        return buf.getvalue()
    if fmt == "markdown":
        out = []
        for n in sorted({c.n for c in result.cells}):
            out.append(f"n = {n}\n")
            out.append("| | Params | (W,H,N) | Time (ms) | Speedup |")
            out.append("|---|---|---|---|---|")
            for c in (c for c in result.cells if c.n == n):
                cfg = c.config
                params = _fmt_params(count_params(cfg).total_params)
                out.append(
                    f"| {c.label} | {params} | ({cfg.ffn_width},{cfg.embed_dim},{cfg.num_heads}) "
                    f"| {c.median_ms:.1f} | {c.speedup:.2f}x |"
                )
            out.append("")
        return "\n".join(out)
    raise ValueError(f"unknown report format {fmt!r}")
