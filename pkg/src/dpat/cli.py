"""Command line: ``dpat train | eval | report`` and ``dpat --print-defaults``.

Exit codes: 0 success, 2 configuration problem, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, MODES, PRESETS, describe_defaults, dump_config, load_config, make_config
from .errors import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("dpat")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config (default: preset values)")
    p.add_argument("--preset", choices=PRESETS, default=None, help="size preset (default: desk, or the file's 'preset')")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--ablate", choices=ABLATIONS, help="remove one component group")
    p.add_argument("--mode", choices=MODES, help="training mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpat", description="Continual video recognition with decoupled prompt-adapter tuning.")
    parser.add_argument("--print-defaults", action="store_true", help="list every config default with its provenance")
    parser.add_argument("--preset-defaults", choices=PRESETS, default="desk", help="preset applied by --print-defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="run the continual protocol and write a report directory")
    _add_run_flags(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-task checkpoints")

    p = sub.add_parser("eval", help="evaluate a checkpoint on its task stream")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="frame folder to evaluate on instead of the checkpoint's dataset")

    p = sub.add_parser("report", help="plot learning curves of one or more report directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="image path (default: <first run>/learning_curve.png, or ./learning_curves.png for several runs)")
    return parser


def resolve_config(args):
    if args.config:
        cfg = load_config(args.config, args.preset)
    else:
        cfg = make_config(args.preset or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.ablate is not None:
        cfg.train.ablate = args.ablate
    if args.mode is not None:
        cfg.train.mode = args.mode
    return cfg.validate()


def cmd_train(args) -> int:
    from .harness import run_experiment

    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    report = run_experiment(cfg, out, progress=print, checkpoints=not args.no_checkpoints)
    bwf = "undefined" if report.bwf is None else f"{report.bwf:.4f}"
    print(f"acc={report.acc:.4f} bwf={bwf} matching_acc={report.matching_acc:.4f} fingerprint={report.fingerprint}")
    print(f"report written to {out}")
    return EXIT_OK


def _run_checkpoints(path: Path) -> list:
    """Checkpoints ``task-1..task-k`` beside ``path`` when it sits in a run directory."""
    import re

    m = re.fullmatch(r"task-(\d+)", path.name)
    if not m:
        return []
    k = int(m.group(1))
    paths = [path.parent / f"task-{t}" for t in range(1, k + 1)]
    return paths if all(p.is_dir() for p in paths) else []


def cmd_eval(args) -> int:
    from .checkpoint import load_model
    from .harness import AccuracyMatrix, build_task_stream, compute_metrics, evaluate_seen, load_dataset

    path = Path(args.checkpoint)
    model, header = load_model(path)
    cfg = model.cfg
    if args.data:
        cfg.data.dataset = args.data
    stream = build_task_stream(load_dataset(cfg), cfg.data.tasks, cfg.seed)
    k = model.num_tasks
    accs, selected = evaluate_seen(model, stream, k)
    hits = np.concatenate([s == i + 1 for i, s in enumerate(selected)])
    for t, a in enumerate(accs):
        print(f"task {t + 1}: acc={a:.4f} matching_acc={(selected[t] == t + 1).mean():.4f}")
    print(f"acc={np.mean(accs):.4f}")
    print(f"matching_acc={hits.mean():.4f}")
    history = _run_checkpoints(path)
    if k >= 2 and history:
        R = AccuracyMatrix(k)
        for j, p in enumerate(history[:-1], start=1):
            row, _ = evaluate_seen(load_model(p)[0], stream, j)
            for i, a in enumerate(row):
                R.set(j, i + 1, a)
        for i, a in enumerate(accs):
            R.set(k, i + 1, a)
        acc, bwf = compute_metrics(R)
        print(f"reconstructed R over {k} tasks: acc={acc:.4f} bwf={bwf:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .harness import read_curve
    from .plotting import plot_learning_curves

    curves = [read_curve(r) for r in args.runs]
    if args.out:
        out = Path(args.out)
    elif len(args.runs) == 1:
        out = Path(args.runs[0]) / "learning_curve.png"
    else:
        out = Path("learning_curves.png")
    plot_learning_curves(curves, out)
    for fp, curve in curves:
        print(fp + "," + ",".join(f"{v:.4f}" for v in curve))
    print(f"figure written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        print(describe_defaults(args.preset_defaults))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    handlers = {"train": cmd_train, "eval": cmd_eval, "report": cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # any runtime failure maps to exit 3
        if args.verbose:
            log.exception("run failed")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
