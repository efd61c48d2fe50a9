"""Static Markdown summary of one or more evaluated runs, with loss-curve plots."""
from __future__ import annotations

import csv
import os
from pathlib import Path
from typing import Sequence

from .errors import MissingArtifactError, ValidationError
from .harness import RunManifest


def _read_csv(path: Path) -> list[dict[str, str]]:
    if not path.is_file():
        raise MissingArtifactError(f"report file not found: {path}")
    return list(csv.DictReader(path.read_text().splitlines()))


def _fmt(x: str | float, digits: int = 4) -> str:
    return f"{float(x):.{digits}f}"


def plot_losses(log_dir: Path, out_path: Path) -> Path | None:
    """One panel per phase loss CSV; None when the run has no logs."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = sorted(log_dir.glob("*_losses.csv"))
    if not logs:
        return None
    fig, axes = plt.subplots(1, len(logs), figsize=(3.2 * len(logs), 2.6), squeeze=False)
    for ax, path in zip(axes[0], logs):
        rows = _read_csv(path)
        cols = list(rows[0])[1:] if rows else []
        for col in cols:
            ax.plot([int(r["epoch"]) for r in rows], [float(r[col]) for r in rows], label=col)
        ax.set_title(path.stem.replace("_losses", ""))
        ax.set_xlabel("epoch")
        if cols:
            ax.legend(fontsize=6)
    fig.tight_layout()
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, metadata={"Software": None})
    plt.close(fig)
    return out_path


def _metric_key(row: dict) -> tuple:
    return int(row["class_count"]), row["basis"], row["metric"]


def cmd_report(run_dirs: Sequence[str | Path], out_dir: str | Path) -> Path:
    """Write ``summary.md`` (plus plots) to ``out_dir``; a delta table is added for two or more runs."""
    if not run_dirs:
        raise ValidationError("report needs at least one run directory")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# Run summary", ""]
    tables = []
    for run_dir in map(Path, run_dirs):
        manifest = RunManifest.load(run_dir)
        metrics = _read_csv(run_dir / "eval" / "report.csv")
        tables.append((manifest.run_id, {_metric_key(r): r for r in metrics}))
        lines += [f"## Run `{manifest.run_id}`", "",
                  f"Seed {manifest.config['seed']}, alpha {manifest.config['dgvr.alpha']}, "
                  f"sampler {manifest.config['dgvr.sampler']} with {manifest.config['dgvr.sample_steps']} steps.", "",
                  "### Reconstruction metrics", "",
                  "| class count | basis | metric | mean | std |", "|---|---|---|---|---|"]
        lines += [f"| {r['class_count']} | {r['basis']} | {r['metric']} | {_fmt(r['mean'])} | {_fmt(r['std'])} |"
                  for r in metrics]
        cls_path = run_dir / "eval" / "report_classification.csv"
        if cls_path.is_file():
            lines += ["", "### Direct classification", "", "| task | k | accuracy | chance | n |", "|---|---|---|---|---|"]
            lines += [f"| {r['task']} | {r['k']} | {_fmt(r['accuracy'])} | {_fmt(r['chance'])} | {r['n']} |"
                      for r in _read_csv(cls_path)]
        plot = plot_losses(run_dir / "logs", out_dir / f"{manifest.run_id}_losses.png")
        if plot is not None:
            lines += ["", "### Training curves", "", f"![losses]({plot.name})"]
        grids = sorted((run_dir / "eval" / "grids").glob("*.png"))
        if grids:
            lines += ["", "### Frame grids (top row ground truth, bottom row generated)", ""]
            lines += [f"![{g.stem}]({Path(os.path.relpath(g, out_dir)).as_posix()})" for g in grids]
        lines.append("")

    if len(tables) > 1:
        base_id, base = tables[0]
        lines += ["## Differences against the first run", "",
                  "| class count | basis | metric | " + " | ".join(f"`{rid}`" for rid, _ in tables)
                  + " | " + " | ".join(f"delta `{rid}`" for rid, _ in tables[1:]) + " |",
                  "|" + "---|" * (3 + 2 * len(tables) - 1)]
        for key in sorted(base):
            if not all(key in t for _, t in tables):
                continue
            values = [float(t[key]["mean"]) for _, t in tables]
            deltas = [v - values[0] for v in values[1:]]
            lines.append(f"| {key[0]} | {key[1]} | {key[2]} | " + " | ".join(_fmt(v) for v in values) + " | "
                         + " | ".join(f"{d:+.4f}" for d in deltas) + " |")
        lines.append("")
    path = out_dir / "summary.md"
    path.write_text("\n".join(lines))
    return path
