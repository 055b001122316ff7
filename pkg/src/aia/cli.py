"""``aia`` command line: audit, gradcheck, train, bench, oracle.

Exit codes: 0 success, 1 check failed, 2 usage error.  The resolved
configuration of every run is printed to stderr before it executes; set
``AIA_LOG_LEVEL`` (DEBUG, INFO, WARNING, ...) for progress logging.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import checks, complexity, toy
from .attention import AttentionConfig
from .variants import VARIANTS, UnknownVariantError, canonical

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
LOG_ENV = "AIA_LOG_LEVEL"

log = logging.getLogger("aia")


class UsageError(Exception):
    pass


def _variant(text: str) -> str:
    try:
        return canonical(text)
    except UnknownVariantError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _size(text: str):
    try:
        return checks.parse_size(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aia", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="parameter and FLOP report for a ResNet-50 backbone or a spec file")
    p.add_argument("--backbone", choices=("tsn", "tsm"), default="tsn")
    p.add_argument("--frames", type=_positive_int, default=8)
    p.add_argument("--crop", type=_positive_int, default=224)
    p.add_argument("--classes", type=_positive_int, default=174)
    p.add_argument("--attention", type=_variant, default="none", metavar="VARIANT",
                   help=f"one of: {', '.join(VARIANTS)}")
    p.add_argument("--width", choices=("reduced", "full"), default="reduced")
    p.add_argument("--convention", choices=complexity.CONVENTIONS, default=complexity.DEFAULT_CONVENTION)
    p.add_argument("--format", choices=complexity.REPORT_FORMATS, default="table")
    p.add_argument("--spec", type=Path, help="YAML or JSON architecture spec; replaces the backbone flags")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")

    p = sub.add_parser("gradcheck", help="finite differences vs analytic gradients for one op or module")
    p.add_argument("--module", required=True, help=f"one of: {', '.join(checks.GRADCHECK_NAMES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, metavar="T,H,W,C")
    p.add_argument("--tol", type=float, help="pass iff error < tol (default 1e-6 for ops, 1e-5 for modules)")
    p.add_argument("--max-param-entries", type=_positive_int,
                   help="perturb at most this many coordinates of each parameter")

    p = sub.add_parser("train", help="train a toy backbone on the moving-square task")
    p.add_argument("--config", type=Path, help="YAML config (see README for keys)")
    p.add_argument("--variant", help="plain, shift or an attention variant; overrides the config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--metrics-out", type=Path, help="per-epoch CSV; the JSON summary goes next to it")
    p.add_argument("--summary-out", type=Path, help="JSON summary path (default: metrics path with .json)")

    p = sub.add_parser("bench", help="median forward and forward+backward wall-clock per iteration")
    p.add_argument("--module", required=True)
    p.add_argument("--size", type=_size, metavar="T,H,W,C")
    p.add_argument("--iters", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("oracle", help="max deviation of one kernel from its naive reference")
    p.add_argument("--op", required=True, help=f"one of: {', '.join(checks.ORACLE_OPS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero", action="store_true", help="use all-zero inputs")
    p.add_argument("--tol", type=float, default=1e-9)
    return parser


def _show_config(command: str, cfg: dict) -> None:
    print(f"config {command}: {json.dumps(cfg, sort_keys=True, default=str)}", file=sys.stderr)


def _write(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_spec(path: Path) -> complexity.ArchSpec:
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read spec: {exc}") from None
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise UsageError(f"{path}:{mark.line + 1}:{mark.column + 1}: {exc.problem}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: spec must be a mapping")
    try:
        return complexity.spec_from_dict(data)
    except (complexity.SpecError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_audit(args) -> int:
    if args.spec is not None:
        spec = _load_spec(args.spec)
        _show_config("audit", {"spec": str(args.spec), "convention": args.convention, "format": args.format})
    else:
        attention = AttentionConfig(args.attention, width=args.width)
        spec = complexity.resnet50_spec(args.backbone.upper(), args.frames, args.crop, args.classes, attention)
        _show_config("audit", {"backbone": args.backbone, "frames": args.frames, "crop": args.crop,
                               "classes": args.classes, "attention": args.attention, "width": args.width,
                               "convention": args.convention, "format": args.format})
    try:
        report = complexity.analyze(spec, args.convention)
    except complexity.SpecError as exc:
        raise UsageError(str(exc)) from None
    _write(complexity.emit_report(report, args.format), args.out)
    if args.out is not None:
        print(f"{report.spec}: {report.params_m} params, {report.flops_g} FLOPs -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    name = args.module.strip().lower()
    if name not in checks.PRIMITIVES:
        try:
            name = canonical(name)
        except UnknownVariantError:
            pass
    if name not in checks.GRADCHECK_NAMES:
        raise UsageError(str(checks.UnknownCheckError("module", args.module, checks.GRADCHECK_NAMES)))
    tol = args.tol if args.tol is not None else (1e-6 if name in checks.PRIMITIVES else 1e-5)
    size = args.size or checks.default_size(name)
    _show_config("gradcheck", {"module": name, "seed": args.seed, "size": list(size), "tol": tol,
                               "max_param_entries": args.max_param_entries})
    try:
        res = checks.gradcheck(name, args.seed, size, max_param_entries=args.max_param_entries)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ok = res.max_rel_error < tol
    print(f"{name}: max relative error {res.max_rel_error:.3e} over {res.entries} entries "
          f"(tol {tol:g}) {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


def _train_config(args) -> toy.TrainConfig:
    text, source = "", "<defaults>"
    if args.config is not None:
        try:
            text = args.config.read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        source = str(args.config)
    try:
        cfg = toy.load_config(text, source)
        overrides = {}
        if args.variant is not None:
            overrides["variant"] = args.variant
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides:
            cfg = toy.load_config(yaml.safe_dump({**toy.config_to_dict(cfg), **overrides}), source)
    except toy.ConfigError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def metrics_csv(history: toy.History) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_top1"])
    for m in history.epochs:
        writer.writerow([m.epoch, repr(m.train_loss), repr(m.val_top1)])
    return buf.getvalue()


def cmd_train(args) -> int:
    cfg = _train_config(args)
    _show_config("train", toy.config_to_dict(cfg))
    train_ds, val_ds = cfg.datasets()
    model = cfg.build_model()
    try:
        hist = toy.train(model, train_ds, cfg, val_ds)
    except toy.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    summary = {"variant": cfg.variant, "seed": cfg.seed, "epochs": cfg.epochs,
               "first_batch_loss": hist.first_batch_loss,
               "final_train_loss": hist.epochs[-1].train_loss, "final_val_top1": hist.final_val_top1,
               "params": sum(p.size for p in model.params())}
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.metrics_out is not None:
        _write(metrics_csv(hist), args.metrics_out)
        _write(text, args.summary_out or args.metrics_out.with_suffix(".json"))
    elif args.summary_out is not None:
        _write(text, args.summary_out)
    sys.stdout.write(metrics_csv(hist))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    name = args.module.strip().lower()
    if name not in checks.PRIMITIVES:
        try:
            name = canonical(name)
        except UnknownVariantError:
            pass
    if name not in checks.GRADCHECK_NAMES:
        raise UsageError(str(checks.UnknownCheckError("module", args.module, checks.GRADCHECK_NAMES)))
    size = args.size or checks.default_size(name)
    _show_config("bench", {"module": name, "size": list(size), "iters": args.iters, "seed": args.seed})
    res = checks.bench(name, size, args.iters, args.seed)
    print(f"{name}: forward median {res.median_forward * 1e3:.3f} ms, "
          f"forward+backward median {res.median_forward_backward * 1e3:.3f} ms over {args.iters} iters")
    return EXIT_OK


def cmd_oracle(args) -> int:
    op = args.op.strip().lower()
    if op not in checks.ORACLE_OPS:
        try:
            op = canonical(op)
        except UnknownVariantError:
            pass
    if op not in checks.ORACLE_OPS:
        raise UsageError(str(checks.UnknownCheckError("op", args.op, checks.ORACLE_OPS)))
    _show_config("oracle", {"op": op, "seed": args.seed, "zero": args.zero, "tol": args.tol,
                            "shape": list(checks.ORACLE_SHAPE)})
    dev = checks.oracle_deviation(op, args.seed, args.zero)
    ok = dev < args.tol
    print(f"{op}: max abs deviation {dev:.3e} (tol {args.tol:g}) {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"audit": cmd_audit, "gradcheck": cmd_gradcheck, "train": cmd_train, "bench": cmd_bench,
            "oracle": cmd_oracle}


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"aia {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
