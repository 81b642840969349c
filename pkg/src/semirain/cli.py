"""Command-line entry point: ``semirain {synth,train,infer,eval,fig3}``.

Exit codes: 0 success, 1 user or data error (including bad flags), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .experiments import GridSpec, mean_final, run_grid
from .imaging import PnmError, load_pnm, save_pgm
from .net import ModelFormatError, load_model
from .rain import MODES, SCENARIOS, build_dataset
from .trainer import ConfigError, DatasetError, TrainCheckpoint, TrainConfig, evaluate, infer, train

log = logging.getLogger("semirain")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports bad flags as user errors (exit 1) instead of argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("need at least one positive integer")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("need at least one non-negative number")
    return vals


def build_parser() -> argparse.ArgumentParser:
    # --seed is accepted before or after the subcommand
    seed_parent = argparse.ArgumentParser(add_help=False)
    seed_parent.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                             help="random seed (overrides the config seed for train)")

    p = _Parser(prog="semirain", description="Semi-supervised single-image rain removal.",
                parents=[seed_parent])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[seed_parent], help="synthesize a rainy dataset from clean images")
    s.add_argument("--clean", required=True, help="directory of clean PGM/PPM images")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--mode", choices=MODES, default="styleA")
    s.add_argument("--scenario", choices=SCENARIOS, default="sparse")
    s.add_argument("--count", type=int, required=True)

    t = sub.add_parser("train", parents=[seed_parent], help="train a model from a JSON config")
    t.add_argument("--config", required=True, help="TrainConfig JSON")
    t.add_argument("--resume", help="checkpoint directory, .sdrn or sidecar .json")

    i = sub.add_parser("infer", parents=[seed_parent], help="derain one image")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)

    e = sub.add_parser("eval", parents=[seed_parent], help="PSNR of a model on clean/rainy pairs")
    e.add_argument("--model", required=True)
    e.add_argument("--pairs", required=True)
    e.add_argument("--report", help="write the per-image table as JSON")

    f = sub.add_parser("fig3", parents=[seed_parent], help="domain-shift grid over supervised size and lambda")
    f.add_argument("--out", required=True)
    f.add_argument("--sizes", type=_int_list, default=[500, 5000])
    f.add_argument("--lambdas", type=_float_list, default=[0.0, 0.2, 1.0])
    f.add_argument("--seeds", type=int, default=3)
    f.add_argument("--epochs", type=int, default=6)
    f.add_argument("--patch-size", type=int, default=32)
    return p


def _load_any_model(path):
    p = Path(path)
    if p.is_dir():
        return TrainCheckpoint.load(p).model
    return load_model(p)


def cmd_synth(args) -> int:
    seed = getattr(args, "seed", 0)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    print(build_dataset(args.clean, args.out, args.mode, args.scenario, args.count, seed))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if hasattr(args, "seed"):
        cfg = replace(cfg, seed=args.seed)
    ckpt, records = train(cfg, resume=args.resume)
    last = records[-1] if records else None
    val = None if last is None else last["valPsnr"]
    print(f"final validation PSNR: {'n/a' if val is None else f'{val:.4f} dB'}")
    print(f"epochs completed: {ckpt.epoch}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_any_model(args.model)
    save_pgm(infer(model, load_pnm(args.input)), args.output)
    print(args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    rep = evaluate(_load_any_model(args.model), args.pairs)
    for row in rep.rows:
        print(f"{row['filename']}\tinput {row['inputPsnr']:.4f}\toutput {row['outputPsnr']:.4f}")
    print(f"mean\tinput {rep.mean_input_psnr:.4f}\toutput {rep.mean_psnr:.4f}")
    if args.report:
        Path(args.report).write_text(json.dumps(rep.to_json(), indent=1) + "\n")
    return EXIT_OK


def cmd_fig3(args) -> int:
    if args.seeds <= 0 or args.epochs <= 0 or args.patch_size < 2:
        raise UsageError("--seeds and --epochs must be positive, --patch-size at least 2")
    base = replace(GridSpec().base, epochs=args.epochs, patch_size=args.patch_size,
                   lr_decay_every=max(1, args.epochs // 3))
    grid = GridSpec(sizes=tuple(args.sizes), lambdas=tuple(args.lambdas), seeds=args.seeds, base=base)
    rows, failures = run_grid(args.out, grid, base_seed=getattr(args, "seed", 0))
    print(Path(args.out) / "summary.csv")
    if rows:
        for size in grid.sizes:
            for lam in grid.lambdas:
                print(f"size {size}\tlambda {lam:g}\tval {mean_final(rows, size, lam):.4f}"
                      f"\ttrain {mean_final(rows, size, lam, 'trainPsnr'):.4f}")
    for f in failures:
        print(f"failed: size {f['size']} lambda {f['lambda']:g} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return EXIT_USER if failures else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "fig3": cmd_fig3}

_USER_ERRORS = (UsageError, ConfigError, DatasetError, ModelFormatError, PnmError, FileNotFoundError,
                NotADirectoryError, PermissionError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _USER_ERRORS as exc:
        print(f"semirain {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:
        log.exception("internal error")
        print(f"semirain {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
