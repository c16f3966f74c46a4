"""Command-line entry point: ``lazyformer {train,bench,count,verify}``.

Exit codes: 0 success, 1 a run or check failed, 2 bad arguments or inputs.
Log verbosity comes from the ``LAZYFORMER_LOG`` environment variable
(DEBUG, INFO, WARNING; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .bench import SCHEDULES
from .errors import LazyFormerError, PlanError, TrainingDivergedError

LOG_ENV = "LAZYFORMER_LOG"

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("lazyformer")

TRAIN_EPILOG = """\
Desk defaults: layout M1x4, (W,H,N)=(512,128,4), seq_len 64, batch 8,
1000 steps, peak lr 1e-3, warm-up ratio 0.01, dropout 0.1.

Full-scale reference recipe (BERT-base shape): (W,H,N)=(3072,768,12),
M1x12 or M2x6 with W=3456, seq_len 512, batch 256, 1M steps, peak lr 1e-4,
warm-up ratio 0.01 (10k steps), linear decay, Adam eps 1e-6 and
betas (0.9, 0.999), clip norm 1.0, dropout 0.1, weight decay 0.01.

Config file sections and keys (all optional):
  [model]    layout ffn_width embed_dim num_heads max_seq_len
             attention_dropout hidden_dropout_p num_rel_buckets rel_max_distance
  [training] seed steps batch_size seq_len peak_lr warmup_ratio weight_decay
             clip_norm mask_prob checkpoint_every corpus vocab
  [output]   log checkpoint_dir
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(kind):
    def parse(text):
        try:
            items = [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"cannot parse {text!r} as a comma-separated list") from None
        if not items:
            raise argparse.ArgumentTypeError("empty list")
        return items

    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lazyformer", description="LazyFormer: transformers that compute self-attention once per lazy block.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser(
        "train",
        help="masked-LM pre-training on a text corpus",
        epilog=TRAIN_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("config", nargs="?", help="run config file ([model], [training], [output] sections)")
    p.add_argument("--seed", type=int, help="override training.seed")
    p.add_argument("--steps", type=int, help="override training.steps")
    p.add_argument("--layout", help="override model.layout, e.g. M2x2")
    p.add_argument("--log", help="override output.log (CSV: step,loss,lr,wall_ms)")
    p.add_argument("--checkpoint-dir", help="override output.checkpoint_dir")

    p = sub.add_parser("bench", help="wall-clock comparison of layouts across sequence lengths")
    p.add_argument("--layouts", type=_csv_list(str), default=["M1x12", "M2x6"], help="comma-separated; the first is the speedup baseline (default: M1x12,M2x6)")
    p.add_argument("--seq-lens", type=_csv_list(int), default=[128, 256, 512, 1024], help="comma-separated sequence lengths (default: 128,256,512,1024)")
    p.add_argument("--iters", type=int, default=5, help="timed runs per cell, at least 3 (default: 5)")
    p.add_argument("--warmup", type=int, default=1, help="discarded runs per cell (default: 1)")
    p.add_argument(
        "--schedule",
        choices=SCHEDULES,
        default="interleaved",
        help="interleaved: alternate configs run by run at each n; contiguous: finish one cell before the next",
    )
    p.add_argument("--mode", choices=["forward", "forward-backward"], default="forward", help="what to time (default: forward)")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--format", choices=["csv", "markdown"], default="csv", help="report format (default: csv)")
    p.add_argument("--ffn-width", type=int, default=1024, help="W (default: 1024)")
    p.add_argument("--embed-dim", type=int, default=256, help="H (default: 256)")
    p.add_argument("--num-heads", type=int, default=4, help="N (default: 4)")
    p.add_argument("--vocab", type=int, default=1000, help="vocabulary size (default: 1000)")
    p.add_argument("--seed", type=int, default=0, help="weights and inputs seed (default: 0)")

    p = sub.add_parser("count", help="parameter and FLOP accounting for one configuration")
    p.add_argument("layout", help="layout spec, e.g. M2x6 or M5M3M2M2")
    p.add_argument("ffn_width", type=int, metavar="W")
    p.add_argument("embed_dim", type=int, metavar="H")
    p.add_argument("num_heads", type=int, metavar="N")
    p.add_argument("--vocab", type=int, default=32768, help="vocabulary size (default: 32768)")
    p.add_argument("--max-len", type=int, default=512, help="max sequence length, also the FLOP length (default: 512)")
    p.add_argument("--base-width", type=int, help="W of the one-layer-per-block baseline to match (default: W)")
    p.add_argument("--format", choices=["table", "jsonl"], default="table", help="output format (default: table)")

    p = sub.add_parser("verify", help="run the fast invariant suite")
    p.add_argument("--seed", type=int, default=0, help="seed for the random cases (default: 0)")
    return parser


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def cmd_train(args) -> int:
    from .model import build_model
    from .pretrain.data import MaskingPolicy, corpus_windows, read_corpus
    from .pretrain.loop import train
    from .pretrain.optim import LrSchedule, OptimizerState
    from .pretrain.text import Vocab
    from .runconfig import load_run_config

    cfg = load_run_config(args.config)
    for attr, section, key in (
        ("seed", "training", "seed"),
        ("steps", "training", "steps"),
        ("layout", "model", "layout"),
    ):
        value = getattr(args, attr)
        if value is not None:
            setattr(getattr(cfg, section), key, value)
    # command-line paths are relative to the working directory, not the config file
    if args.log is not None:
        cfg.output.log = str(Path(args.log).resolve())
    if args.checkpoint_dir is not None:
        cfg.output.checkpoint_dir = str(Path(args.checkpoint_dir).resolve())
    cfg.validate()

    t = cfg.training
    vocab = Vocab.from_file(cfg.vocab_path())
    windows = corpus_windows(read_corpus(cfg.corpus_path()), vocab, t.seq_len)
    model = build_model(cfg.model_config(len(vocab)), t.seed)
    sched = LrSchedule.from_ratio(t.peak_lr, t.steps, t.warmup_ratio)
    policy = MaskingPolicy(len(vocab), mask_prob=t.mask_prob)
    opt = OptimizerState(weight_decay=t.weight_decay, clip_norm=t.clip_norm)
    log.info("training %s for %d steps on %d windows", cfg.model.layout, t.steps, len(windows))
    rows = train(
        model,
        windows,
        steps=t.steps,
        batch_size=t.batch_size,
        sched=sched,
        policy=policy,
        seed=t.seed,
        opt=opt,
        log_path=cfg.log_path(),
        checkpoint_dir=cfg.checkpoint_dir(),
        checkpoint_every=t.checkpoint_every,
    )
    head = min(100, len(rows))
    first = sum(r.loss for r in rows[:head]) / head
    last = sum(r.loss for r in rows[-head:]) / head
    print(f"trained {cfg.model.layout} for {len(rows)} steps: mean loss first {head} = {first:.4f}, last {head} = {last:.4f}")
    print(f"log: {cfg.log_path()}")
    print(f"checkpoints: {cfg.checkpoint_dir()}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchPlan, emit_report, run_bench
    from .model import ModelConfig

    max_len = max(args.seq_lens)
    configs = []
    for spec in args.layouts:
        config = ModelConfig(
            ffn_width=args.ffn_width,
            embed_dim=args.embed_dim,
            num_heads=args.num_heads,
            vocab_size=args.vocab,
            max_seq_len=max_len,
            layout=spec,
        )
        configs.append((str(config.layout), config))
    plan = BenchPlan(configs, args.seq_lens, args.iters, args.warmup, args.mode, baseline=configs[0][0], seed=args.seed, schedule=args.schedule)
    if args.out and not Path(args.out).resolve().parent.is_dir():
        raise PlanError(f"output directory does not exist: {Path(args.out).parent}")
    result = run_bench(plan, progress=lambda label, n, ms: log.info("%s n=%d median %.1f ms", label, n, ms))
    report = emit_report(result, args.format)
    if args.out:
        Path(args.out).write_text(report, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(report)
    return EXIT_OK


def cmd_count(args) -> int:
    from .accounting import compensated_width, count_params
    from .model import ModelConfig, parse_layout

    layout = parse_layout(args.layout)
    config = ModelConfig(
        ffn_width=args.ffn_width,
        embed_dim=args.embed_dim,
        num_heads=args.num_heads,
        vocab_size=args.vocab,
        max_seq_len=args.max_len,
        layout=layout,
    )
    report = count_params(config)
    if args.format == "jsonl":
        sys.stdout.write(report.to_jsonl())
        return EXIT_OK
    base = args.base_width or args.ffn_width
    suggestion = compensated_width(base, args.embed_dim, layout.num_layers, layout)
    print(report.to_table())
    print(f"compensated width for parity with M1x{layout.num_layers} at W={base}: {suggestion}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_verify

    results = run_verify(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


COMMANDS = {"train": cmd_train, "bench": cmd_bench, "count": cmd_count, "verify": cmd_verify}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except LazyFormerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
