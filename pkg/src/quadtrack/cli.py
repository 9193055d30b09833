"""Command-line entry point: ``quadtrack {synth,train,gradcheck,track,eval,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import ablation as ab
from . import data_io as dio
from . import embed_net as en
from . import eval_bench as eb
from . import gradcheck as gc
from .train_engine import MODES, DivergenceError, TrainConfig, train
from .track_engine import Tracker

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("quadtrack")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _config(path: str | None, cls, **extra_keys):
    """Read a ``key = value`` file into ``cls``; keys in ``extra_keys`` are split off and returned."""
    values = dio.parse_kv(Path(path).read_text(), path) if path else {}
    extras = {k: type(d)(values.pop(k)) if k in values else d for k, d in extra_keys.items()}
    return dio.from_kv(cls, values, path or "config"), extras


def cmd_synth(args) -> int:
    spec, _ = _config(args.spec, dio.SynthSpec)
    dio.synth_generate(spec, args.seed, args.out, args.threads)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg, _ = _config(args.config, TrainConfig)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    net, weights, report = train(dio.load_dataset(args.data), cfg)
    en.save(net, args.out)
    if args.report:
        report.write(args.report)
    log.info("saved %s (best epoch %d, weights %.3f/%.3f)", args.out, report.best_epoch, weights.w1, weights.w2)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gc.run_suite(args.seed, args.bits, args.tol)
    print(gc.format_table(results, args.bits))
    if not all(r.passed for r in results):
        raise NumericalFailure("gradient check failed: " + ", ".join(r.name for r in results if not r.passed))
    return EXIT_OK


def cmd_track(args) -> int:
    net = en.load(args.model)
    seq = dio.load_sequence(args.seq)
    boxes = Tracker(net)(seq.frames, seq.boxes[0])
    dio.write_boxes(args.out, boxes)
    return EXIT_OK


def _offline(pred: Path, seqs: list[dio.Sequence]) -> eb.EvalResult:
    per = {}
    for s in seqs:
        path = pred / f"{s.name}.txt" if pred.is_dir() else pred
        if not pred.is_dir() and len(seqs) != 1:
            raise dio.DataError(f"{pred} is a single boxes file but the data holds {len(seqs)} sequences")
        per[s.name] = eb.curves(dio.read_boxes(path), s.boxes)
    return eb.EvalResult("ope", eb.mean_curves(list(per.values())), per, len(per), None)


def _print_summary(results: dict[str, eb.EvalResult]) -> None:
    print(f"{'tracker':<16}{'prec@20':>9}{'succ@0.5':>10}{'auc':>8}{'mean_iou':>10}{'fps':>9}")
    for name, r in results.items():
        a = r.aggregate
        fps = f"{r.fps:.1f}" if r.fps else "-"
        print(f"{name:<16}{a.precision_at_20:>9.3f}{a.success_at_05:>10.3f}{a.auc:>8.3f}{a.mean_iou:>10.3f}{fps:>9}")


def cmd_eval(args) -> int:
    if (args.model is None) == (args.pred is None):
        raise UsageError("eval: give exactly one of --model or --pred")
    seqs = dio.load_dataset(args.data)
    if args.pred is not None:
        if args.protocol != "ope":
            raise UsageError("eval: --pred scores fixed predictions, which only makes sense for --protocol ope")
        results = {"pred": _offline(Path(args.pred), seqs)}
    else:
        tracker = Tracker(en.load(args.model), name=Path(args.model).stem)
        results = {tracker.name: eb.PROTOCOLS[args.protocol](tracker, seqs, args.threads)}
    eb.report(results, args.out)
    _print_summary(results)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, extra = _config(args.config, TrainConfig, test_sequences=0)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    seqs = dio.load_dataset(args.data)
    n_test = args.test_sequences or extra["test_sequences"] or max(1, len(seqs) // 6)
    train_set, test_set = ab.split(seqs, n_test)
    results, reports = ab.run_ablation(train_set, test_set, cfg, threads=args.threads)
    ab.ablation_report(results, reports, args.out)
    _print_summary(results)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=1, help="worker/BLAS threads (default 1, bit-reproducible)")
    p = _Parser(prog="quadtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help, parents=[common])

    s = add("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="key = value generator settings")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = add("train", help="train an embedding")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value training settings")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--report", help="write per-epoch JSON lines here")
    s.set_defaults(func=cmd_train)

    s = add("gradcheck", help="analytic vs finite-difference gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float)
    s.add_argument("--bits", type=int, choices=(32, 64), default=64)
    s.set_defaults(func=cmd_gradcheck)

    s = add("track", help="track one sequence")
    s.add_argument("--model", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True, help="boxes file to write")
    s.set_defaults(func=cmd_track)

    s = add("eval", help="benchmark a model or score saved predictions")
    s.add_argument("--protocol", choices=sorted(eb.PROTOCOLS), default="ope")
    s.add_argument("--model")
    s.add_argument("--pred", help="boxes file, or directory of <sequence>.txt files")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="JSON report to write")
    s.set_defaults(func=cmd_eval)

    s = add("ablate", help="train every loss mode and compare")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value training settings (plus test_sequences)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--test-sequences", type=int, help="held-out sequences (taken from the end)")
    s.set_defaults(func=cmd_ablate)
    return p


def _setup_logging() -> None:
    level = os.environ.get("QUAD_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"QUAD_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:  # includes DataError, ImageFormatError, ModelFormatError
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
