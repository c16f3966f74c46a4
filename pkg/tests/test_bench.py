import csv
import io

import numpy as np
import pytest

from lazyformer.bench import BenchPlan, desk_config, emit_report, median_mad, run_bench
from lazyformer.errors import PlanError
from lazyformer.model import ModelConfig


def tiny(layout, max_len=32):
    return ModelConfig(ffn_width=32, embed_dim=16, num_heads=2, vocab_size=50, max_seq_len=max_len, layout=layout)


def csv_rows(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.reader(io.StringIO("\n".join(body))))


def test_median_mad():
    assert median_mad([1.0, 2.0, 3.0, 10.0, 4.0]) == (3.0, 1.0)


def test_single_cell_report_has_header_and_one_row():
    result = run_bench(BenchPlan([("baseline", tiny("M1x2"))], [8], iters=3))
    rows = csv_rows(emit_report(result))
    assert rows[0] == ["label", "n", "median_ms", "mad_ms", "speedup"]
    assert len(rows) == 2
    assert rows[1][0] == "baseline" and rows[1][1] == "8" and float(rows[1][4]) == 1.0


def test_header_records_threads_and_seed():
    result = run_bench(BenchPlan([("baseline", tiny("M1x2"))], [4], iters=3, seed=7))
    text = emit_report(result)
    assert "# engine_threads=" in text and "# seed=7" in text and "# build=" in text


def test_speedups_relative_to_baseline():
    plan = BenchPlan([("base", tiny("M1x4")), ("lazy", tiny("M2x2"))], [8, 16], iters=3, baseline="base")
    result = run_bench(plan)
    for n in (8, 16):
        base, lazy = result.cell("base", n), result.cell("lazy", n)
        assert base.speedup == 1.0
        assert lazy.speedup == pytest.approx(base.median_ms / lazy.median_ms)
        assert len(lazy.samples_ms) == 3 and lazy.mad_ms >= 0
    assert set(result.speedups("lazy")) == {8, 16}


def test_forward_backward_mode_runs():
    result = run_bench(BenchPlan([("baseline", tiny("M2x1"))], [6], iters=3, measure="forward-backward"))
    assert result.header["mode"] == "train" and result.cells[0].median_ms > 0


def test_markdown_report_layout():
    plan = BenchPlan([("baseline", tiny("M1x2")), ("M2x1", tiny("M2x1"))], [4, 8], iters=3)
    text = emit_report(run_bench(plan), "markdown")
    assert text.count("| | Params | (W,H,N) | Time (ms) | Speedup |") == 2
    assert "(32,16,2)" in text and "n = 8" in text


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(iters=2),
        dict(warmup_iters=0),
        dict(measure="backward"),
        dict(mode="fast"),
        dict(baseline="missing"),
        dict(seq_lens=[64]),
        dict(seq_lens=[]),
    ],
)
def test_invalid_plans_fail_before_running(kwargs):
    args = dict(configs=[("baseline", tiny("M1x2"))], seq_lens=[8], iters=3)
    args.update(kwargs)
    with pytest.raises(PlanError):
        BenchPlan(**args)


def test_duplicate_labels_rejected():
    with pytest.raises(PlanError):
        BenchPlan([("baseline", tiny("M1x2")), ("baseline", tiny("M2x1"))], [4])


def test_unknown_report_format():
    result = run_bench(BenchPlan([("baseline", tiny("M1x2"))], [4], iters=3))
    with pytest.raises(ValueError):
        emit_report(result, "xml")


def test_desk_config_shape():
    config = desk_config("M2x6")
    assert (config.ffn_width, config.embed_dim, config.num_heads, config.num_layers) == (1024, 256, 4, 12)


def test_contiguous_schedule_and_bad_schedule():
    plan = BenchPlan([("baseline", tiny("M1x2")), ("M2x1", tiny("M2x1"))], [4], iters=3, schedule="contiguous")
    result = run_bench(plan)
    assert result.header["schedule"] == "contiguous" and len(result.cells) == 2
    with pytest.raises(PlanError):
        BenchPlan([("baseline", tiny("M1x2"))], [4], schedule="random")


def test_median_is_robust_to_one_outlier():
    rng = np.random.default_rng(0)
    for _ in range(20):
        samples = list(100.0 + rng.normal(0.0, 5.0, size=9))
        med, mad = median_mad(samples)
        spoiled = samples[:]
        spoiled[rng.integers(9)] *= 10
        assert abs(median_mad(spoiled)[0] - med) < mad
