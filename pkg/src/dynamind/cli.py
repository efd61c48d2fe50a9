"""Command line: ``dynamind train|evaluate|ablate|report``.

Exit codes: 0 success, 2 configuration/validation error, 3 training divergence,
4 missing artifact.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import DynaMindError, LoadError


def _class_counts(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynamind", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("train", "run every training phase (resumes from checkpoints)"),
                       ("evaluate", "sample held-out reconstructions and write the metric report"),
                       ("ablate", "train and evaluate the full ablation grid"),
                       ("report", "render a Markdown summary of evaluated runs")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="YAML file with dotted keys")
        p.add_argument("--paper-scale", action="store_true", help="use the full-scale epoch counts, learning rates and dimensions")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output root (overrides DYNAMIND_OUT and the config's out_dir)")
        if name == "evaluate":
            p.add_argument("--class-counts", type=_class_counts, help="e.g. 10,20,30,40")
        if name == "report":
            p.add_argument("--runs", nargs="+", type=Path, help="run directories (default: the configured run)")
    return parser


def run(argv: list[str] | None = None) -> int:
    from .harness import (RunManifest, cmd_ablate, cmd_evaluate, cmd_train, resolve_out_root, run_dir_for)

    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_config(args.config, paper_scale=args.paper_scale, overrides=overrides)
    out_root = resolve_out_root(cfg, args.out)

    if args.command == "train":
        manifest = cmd_train(cfg, out_root)
        print(f"trained {manifest.run_id} -> {manifest.run_dir}")
    elif args.command == "evaluate":
        manifest = RunManifest.load(run_dir_for(cfg, out_root))
        paths = cmd_evaluate(manifest, args.class_counts)
        print(f"report -> {paths['report_csv']}")
    elif args.command == "ablate":
        paths = cmd_ablate(cfg, out_root)
        print(Path(paths["markdown"]).read_text())
    else:
        from .report import cmd_report

        runs = args.runs or [run_dir_for(cfg, out_root)]
        path = cmd_report(runs, out_root / "reports" / (runs[0].name if len(runs) == 1 else "comparison"))
        print(f"summary -> {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except DynaMindError as exc:
        print(f"dynamind: error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 1
    except LoadError as exc:
        print(f"dynamind: error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
