"""Command-line entry point.

Every subcommand reads the experiment config (``--config``, else the shipped
default), applies ``--seed`` to ``master_seed`` and works inside ``--out``.
Stages that need checkpoints read ``theta0.ckpt`` / ``theta1.ckpt`` from the
output directory, so ``pretrain``, ``finetune``, ``sweep`` ... can be run one
at a time and give the same files as ``run``.

Exit codes: 0 success, 1 other library error, 2 configuration or argument
error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .. import checkpoint as ckpt
from .. import metrics as MT
from ..errors import ConfigError, NumericError, StageError, WiselabError
from . import experiment as X
from .config import ExperimentConfig, default_config, load_config

log = logging.getLogger("wiselab")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class UsageError(WiselabError):
    """Bad command-line input that argparse itself cannot catch."""


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.output_dir)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(path)


def _save_ckpt(path: Path, c: ckpt.Checkpoint) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(c, path)
    print(path)


def _load_pair(out: Path) -> tuple[ckpt.Checkpoint, ckpt.Checkpoint]:
    return ckpt.load(out / X.THETA0), ckpt.load(out / X.THETA1)


def cmd_pretrain(args) -> None:
    cfg = _config(args)
    out = _out(args, cfg)
    theta0 = X.stage_pretrain(cfg, X.build_data(cfg))
    _save_ckpt(out / X.THETA0, theta0)


def cmd_finetune(args) -> None:
    cfg = _config(args)
    out = _out(args, cfg)
    theta0 = ckpt.load(out / X.THETA0)
    theta1, trace, _ = X.stage_finetune(cfg, X.build_data(cfg), theta0)
    _save_ckpt(out / X.THETA1, theta1)
    out.mkdir(parents=True, exist_ok=True)
    trace.write_csv(out / "trace.csv")
    print(out / "trace.csv")


def cmd_interpolate(args) -> None:
    if not (math.isfinite(args.alpha) and 0.0 <= args.alpha <= 1.0):
        raise UsageError(f"--alpha must lie in [0, 1], got {args.alpha}")
    cfg = None
    if args.theta0 is None or args.theta1 is None or args.output is None:
        cfg = _config(args)
    out = _out(args, cfg) if cfg is not None else None
    p0 = Path(args.theta0) if args.theta0 else out / X.THETA0
    p1 = Path(args.theta1) if args.theta1 else out / X.THETA1
    dst = Path(args.output) if args.output else out / f"interp_{args.alpha!r}.ckpt"
    _save_ckpt(dst, ckpt.interpolate(ckpt.load(p0), ckpt.load(p1), args.alpha))


def cmd_sweep(args) -> None:
    cfg = _config(args)
    out = _out(args, cfg)
    theta0, theta1 = _load_pair(out)
    sweep = X.stage_sweep(cfg, X.build_data(cfg), theta0, theta1)
    _write(out / "sweep.csv", sweep.to_csv())
    _write(out / "sweep.json", X.dump_json(sweep.to_dict()))


def cmd_diversity(args) -> None:
    cfg = _config(args)
    out = _out(args, cfg)
    theta0, theta1 = _load_pair(out)
    _write(out / "diversity.json", X.dump_json(X.stage_diversity(cfg, X.build_data(cfg), theta0, theta1)))


def _read_points(path: str) -> list[tuple[float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [(float(r["ref_acc"]), float(r["shift_acc"])) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: expected columns ref_acc,shift_acc ({exc})") from exc


def cmd_fit_baseline(args) -> None:
    if args.points:
        fit = MT.fit_baseline(_read_points(args.points))
        sys.stdout.write(X.dump_json(fit.to_dict()))
        return
    cfg = _config(args)
    out = _out(args, cfg)
    sweep = X.AlphaSweep.from_dict(json.loads((out / "sweep.json").read_text()))
    data = X.build_data(cfg)
    robustness = X.stage_robustness(cfg, data, sweep, X.train_zoo(cfg, data))
    _write(out / "robustness.json", X.dump_json(robustness))


def cmd_plot(args) -> None:
    cfg = _config(args)
    out = _out(args, cfg)
    sweep = X.AlphaSweep.from_dict(json.loads((out / "sweep.json").read_text()))
    robustness_path = out / "robustness.json"
    robustness = json.loads(robustness_path.read_text()) if robustness_path.exists() else {}
    for name, svg in X.stage_plots(cfg, sweep, robustness).items():
        _write(out / "plots" / name, svg)


def cmd_run(args) -> None:
    cfg = _config(args)
    print(X.run_experiment(cfg, _out(args, cfg)))


def build_parser() -> argparse.ArgumentParser:
    def common(suppress: bool) -> argparse.ArgumentParser:
        # flags are accepted before or after the subcommand; the subcommand copy
        # must not clobber a value given before it
        kw = {"default": argparse.SUPPRESS} if suppress else {}
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--config", help="experiment config JSON (default: built-in config)", **kw)
        p.add_argument("--seed", type=int, help="override master_seed", **kw)
        p.add_argument("--out", help="output directory (default: config output_dir)", **kw)
        p.add_argument("-v", "--verbose", action="store_true", **kw)
        return p

    parser = argparse.ArgumentParser(
        prog="wiselab",
        description="Fine-tune, interpolate and evaluate small classifiers under distribution shift.",
        parents=[common(False)],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "pretrain": (cmd_pretrain, "build the zero-shot model and write theta0.ckpt"),
        "finetune": (cmd_finetune, "fine-tune theta0.ckpt into theta1.ckpt and trace.csv"),
        "interpolate": (cmd_interpolate, "write (1 - alpha) * theta0 + alpha * theta1"),
        "sweep": (cmd_sweep, "evaluate the alpha grid, write sweep.csv and sweep.json"),
        "diversity": (cmd_diversity, "write diversity.json"),
        "fit-baseline": (cmd_fit_baseline, "fit the reference-only baseline, write robustness.json"),
        "plot": (cmd_plot, "render plots/*.svg from sweep.json and robustness.json"),
        "run": (cmd_run, "full pipeline"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text, parents=[common(True)])
        p.set_defaults(func=fn)
        if name == "interpolate":
            p.add_argument("--alpha", type=float, required=True)
            p.add_argument("--theta0", help="default: <out>/theta0.ckpt")
            p.add_argument("--theta1", help="default: <out>/theta1.ckpt")
            p.add_argument("--output", help="default: <out>/interp_<alpha>.ckpt")
        if name == "fit-baseline":
            p.add_argument("--points", help="CSV with ref_acc,shift_acc columns; prints the fit")
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (WiselabError, OSError) as exc:
        print(f"wiselab {args.command}: {exc}", file=sys.stderr)
        if isinstance(exc, OSError):
            return EXIT_ERROR
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
