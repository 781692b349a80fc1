"""Command line: ``serverless-kd run|preview|report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import VERSION
from .config import ConfigError, load_config
from .costs import aggregate_reports, write_plots


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="serverless-kd", description="Serverless federated distillation simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log round progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config end to end")
    run.add_argument("config", type=Path)
    run.add_argument("--seed", type=_u64, help="override the config seed")
    run.add_argument("--out", type=Path, help="override the output directory")

    preview = sub.add_parser("preview", help="print the client x class partition matrix as CSV")
    preview.add_argument("config", type=Path)
    preview.add_argument("--seed", type=_u64)
    preview.add_argument("--out", type=Path, help="write the CSV here instead of stdout")

    report = sub.add_parser("report", help="summarize one or more artifact directories")
    report.add_argument("artifact_dirs", type=Path, nargs="+")
    report.add_argument("--plots", action="store_true", help="write accuracy/timing PNGs (needs matplotlib)")
    report.add_argument("--out", type=Path, help="write the combined summary JSON here")
    return parser


def _load(args):
    config = load_config(args.config)
    return config.with_overrides(seed=args.seed, output_dir=str(args.out) if args.out else None)


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    config = _load(args)
    result = run_experiment(config)
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return result.status
    rep = result.report
    print(f"artifacts: {result.out_dir}")
    print(f"invocations: {rep['invocations']}  total cost: ${rep['total_cost_usd']:.6g}")
    final = result.history[-1]["accuracy"] if result.history else {}
    for arch, acc in sorted(final.items()):
        print(f"final top-1 [{arch}]: {acc:.4f}")
    if rep["flagged_rounds"]:
        print(f"rounds with aborted steps: {rep['flagged_rounds']}", file=sys.stderr)
        for f in rep["failures"]:
            print(f"  {f['round']} {f['step']} {f['function']}: {f['outcome']}", file=sys.stderr)
    return result.status


def _cmd_preview(args) -> int:
    from .experiment import partition_preview

    text = partition_preview(_load(args))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_report(args) -> int:
    reports = {}
    for d in args.artifact_dirs:
        path = d / "report.json"
        if not path.exists():
            print(f"error: {path} not found", file=sys.stderr)
            return 2
        reports[str(d)] = json.loads(path.read_text())
        if args.plots:
            write_plots(reports[str(d)], d)
    combined = aggregate_reports(reports)
    for name, steps in combined["runs"].items():
        cols = list(steps["cost_usd"])
        print(name)
        print("  " + "".join(f"{c:>14}" for c in ["", *cols]))
        print("  " + f"{'minutes':>14}" + "".join(f"{steps['duration_min'][c]:>14.4g}" for c in cols))
        print("  " + f"{'cost (USD)':>14}" + "".join(f"{steps['cost_usd'][c]:>14.4g}" for c in cols))
    if args.out:
        args.out.write_text(json.dumps(combined, indent=2, sort_keys=True) + "\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"run": _cmd_run, "preview": _cmd_preview, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
