"""Command line entry point: ``wconv {train,sweep,bench,metrics,selftest}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("wconv")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; we want usage text and 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _add_run_flags(p):
    p.add_argument("--config", required=True, help="INI file or name of a bundled config")
    p.add_argument("--seed", type=int, help="override [experiment] seed")
    p.add_argument("--out", help="output directory (default: out_dir/name from the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wconv", description="Weighted convolution experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one configuration")
    _add_run_flags(p)
    p.add_argument("--save-model", action="store_true", help="write a checkpoint next to the CSV")

    p = sub.add_parser("sweep", help="train every point of the config's density grid")
    _add_run_flags(p)

    p = sub.add_parser("bench", help="time standard vs weighted forward convolution")
    p.add_argument("--size", type=int, nargs="+", default=[32, 256], help="image extents N")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--filters", type=int, default=16)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--reps", type=int, default=50)
    p.add_argument("--backend", choices=("numba", "numpy"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write results as CSV into this directory")

    p = sub.add_parser("metrics", help="compare two PPM/PGM files or two directories of them")
    p.add_argument("pred")
    p.add_argument("reference")
    p.add_argument("--out", help="write results as CSV into this directory")

    sub.add_parser("selftest", help="run the built-in invariant checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .harness.config import ConfigError

    handler = {"train": _train, "sweep": _sweep, "bench": _bench,
               "metrics": _metrics, "selftest": _selftest}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _load(args):
    from .harness.config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            from .harness.config import ConfigError

            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path(cfg.out_dir) / cfg.name
    return cfg, out


def _train(args) -> int:
    from .harness.config import ConfigError
    from .harness.report import emit_report, render_confusion
    from .harness.training import run_training
    from .nn import save_model

    cfg, out = _load(args)
    if cfg.grid is not None:
        raise ConfigError("config declares a [sweep] grid; use `wconv sweep`")
    result = run_training(cfg)
    path = emit_report(result.report, out / "train.csv")
    print(f"wrote {path}")
    if result.confusion is not None:
        print(f"wrote {render_confusion(result.confusion, out / 'confusion.ppm')}")
    if args.save_model:
        print(f"wrote {save_model(result.model, out / 'model')}")
    for row in result.report.rows:
        print(_summary(row))
    return EXIT_OK


def _sweep(args) -> int:
    from .harness.config import ConfigError
    from .harness.report import emit_report
    from .harness.training import sweep_alpha

    cfg, out = _load(args)
    if cfg.grid is None:
        raise ConfigError("config has no [sweep] section; use `wconv train`")
    report = sweep_alpha(cfg)
    path = emit_report(report, out / "sweep.csv")
    print(f"wrote {path}")
    for row in report.rows:
        if row["split"] == "val":
            mark = "  <- selected" if row["selected"] else ""
            print(f"alpha={row['alpha']:<14} val_loss={row['loss']:.6g}{mark}")
    return EXIT_OK


def _summary(row) -> str:
    keys = ("loss", "accuracy", "f1", "psnr", "ssim", "input_psnr", "sec_per_epoch")
    vals = " ".join(f"{k}={row[k]:.4g}" for k in keys if row[k] is not None)
    return f"{row['split']:<5} {row['variant']} alpha={row['alpha']} {vals}"


def _bench(args) -> int:
    import csv

    from . import _kernels
    import numpy as np

    from .conv import overhead_samples

    prev = _kernels.set_backend(args.backend) if args.backend else None
    rows = []
    try:
        print(f"backend={_kernels.get_backend()} C={args.channels} F={args.filters} K={args.kernel} reps={args.reps}")
        for n in args.size:
            s, w = overhead_samples(n, args.channels, args.filters, args.kernel, args.reps, args.seed)
            ts, tw, ratio = float(np.median(s)), float(np.median(w)), float(np.median(w / s))
            rows.append((n, ts, tw, ratio))
            print(f"N={n:<5} standard={ts * 1e3:.3f} ms  weighted={tw * 1e3:.3f} ms  paired ratio={ratio:.4f}")
    finally:
        if prev is not None:
            _kernels.set_backend(prev)
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("n", "t_standard", "t_weighted", "ratio"))
            w.writerows(rows)
    return EXIT_OK


def _image_pairs(pred: Path, ref: Path):
    if pred.is_dir() != ref.is_dir():
        raise ValueError("give two files or two directories")
    if not pred.is_dir():
        return [(pred, ref)]
    suffixes = (".ppm", ".pgm", ".pnm")
    names = sorted(p.name for p in pred.iterdir() if p.suffix.lower() in suffixes)
    missing = [n for n in names if not (ref / n).exists()]
    if missing or not names:
        raise ValueError(f"no matching images, or missing in {ref}: {missing[:5]}")
    return [(pred / n, ref / n) for n in names]


def _metrics(args) -> int:
    import csv

    from .data import load_ppm
    from .metrics import image_metrics

    pairs = _image_pairs(Path(args.pred), Path(args.reference))
    rows = []
    for a, b in pairs:
        m = image_metrics(load_ppm(a), load_ppm(b))
        rows.append((a.name, m))
        print(a.name + " " + " ".join(f"{k}={v:.6g}" for k, v in m.items()))
    if args.out:
        path = Path(args.out)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("image", *rows[0][1]))
            w.writerows((name, *(repr(v) for v in m.values())) for name, m in rows)
    return EXIT_OK


def _selftest(args) -> int:
    from .selftest import run_selftest

    failed = 0
    for name, problem in run_selftest():
        print(f"{'PASS' if problem is None else 'FAIL'}  {name}" + ("" if problem is None else f": {problem}"))
        failed += problem is not None
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
