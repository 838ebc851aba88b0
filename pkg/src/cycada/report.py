"""Report rendering: results tables, translation-triple grids, confusion
heatmaps, loss curves.

Figures go to PNG files via the Agg backend; tables go to markdown and CSV
side by side. Every figure carries the seed and checkpoint hash it came
from so reported numbers stay traceable.
"""

from __future__ import annotations

import csv
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import yaml

from .errors import ReportError

TABLE_COLUMNS = ("shift", "method", "mean_accuracy", "stderr")


def _to_display(images: np.ndarray) -> np.ndarray:
    """(N, C, H, W) in [-1, 1] -> (N, H, W[, C]) in [0, 1] for imshow."""
    arr = (np.asarray(images) + 1.0) / 2.0
    arr = np.clip(arr, 0.0, 1.0)
    if arr.shape[1] == 1:
        return arr[:, 0]
    return np.transpose(arr, (0, 2, 3, 1))


def save_triples_grid(path, originals, translated, reconstructed,
                      caption: str | None = None) -> Path:
    """Row-major grid, three columns per triple: original | translated | reconstructed."""
    cols = [_to_display(originals), _to_display(translated), _to_display(reconstructed)]
    n = cols[0].shape[0]
    fig, axes = plt.subplots(n, 3, figsize=(3 * 1.4, n * 1.4), squeeze=False)
    titles = ("original", "translated", "reconstructed")
    for row in range(n):
        for col in range(3):
            ax = axes[row][col]
            ax.imshow(cols[col][row], cmap="gray", vmin=0.0, vmax=1.0)
            ax.set_axis_off()
            if row == 0:
                ax.set_title(titles[col], fontsize=8)
    if caption:
        fig.suptitle(caption, fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_confusion_heatmap(path, counts, caption: str | None = None) -> Path:
    """Row-normalized confusion heatmap with per-cell counts."""
    counts = np.asarray(counts, dtype=np.float64)
    row_sums = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, row_sums, out=np.zeros_like(counts), where=row_sums > 0)
    n = counts.shape[0]
    fig, ax = plt.subplots(figsize=(max(3.0, 0.5 * n + 1.5),) * 2)
    image = ax.imshow(normalized, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    if n <= 12:
        for i in range(n):
            for j in range(n):
                ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                        fontsize=7, color="white" if normalized[i, j] < 0.6 else "black")
    fig.colorbar(image, ax=ax, fraction=0.046)
    if caption:
        ax.set_title(caption, fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_loss_curves(path, losses_csv, caption: str | None = None) -> Path:
    """Per-term loss trajectories from a stage's losses.csv."""
    series: dict = {}
    with open(losses_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            series.setdefault(row["term"], ([], []))
            series[row["term"]][0].append(int(row["iteration"]))
            series[row["term"]][1].append(float(row["value"]))
    if not series:
        raise ReportError(f"no loss rows in {losses_csv}")
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for term, (xs, ys) in sorted(series.items()):
        ax.plot(xs, ys, label=term, linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    if caption:
        ax.set_title(caption, fontsize=8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


@dataclass
class ReportBundle:
    """Everything the report emitter needs, already resolved from run outputs."""

    rows: list = field(default_factory=list)  # dicts with TABLE_COLUMNS keys
    confusion_sources: list = field(default_factory=list)  # (counts, caption, name)
    triple_sources: list = field(default_factory=list)  # (src_path, name)
    loss_sources: list = field(default_factory=list)  # (losses_csv, caption, name)


def format_results_markdown(rows: list) -> str:
    lines = [
        "| Shift | Method | Mean accuracy | Std. error |",
        "| --- | --- | --- | --- |",
    ]
    for row in rows:
        stderr = row.get("stderr")
        stderr_text = f"{stderr:.4f}" if stderr is not None else "-"
        mean = row.get("mean_accuracy")
        mean_text = f"{mean:.4f}" if mean is not None else "-"
        lines.append(f"| {row['shift']} | {row['method']} | {mean_text} | {stderr_text} |")
    return "\n".join(lines) + "\n"


def write_results_csv(path, rows: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row.get(key, "") for key in TABLE_COLUMNS})
    return path


def emit_report(bundle: ReportBundle, out_dir,
                formats: tuple = ("markdown-table", "csv", "image-grid")) -> list:
    """Write the selected report artifacts; returns the emitted paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted = []
    if "markdown-table" in formats:
        md = out_dir / "results.md"
        md.write_text(format_results_markdown(bundle.rows))
        emitted.append(md)
    if "csv" in formats:
        emitted.append(write_results_csv(out_dir / "results.csv", bundle.rows))
    if "image-grid" in formats:
        for counts, caption, name in bundle.confusion_sources:
            emitted.append(
                save_confusion_heatmap(out_dir / f"confusion-{name}.png", counts, caption)
            )
        for src_path, name in bundle.triple_sources:
            dest = out_dir / f"triples-{name}.png"
            shutil.copyfile(src_path, dest)
            emitted.append(dest)
        for losses_csv, caption, name in bundle.loss_sources:
            emitted.append(
                save_loss_curves(out_dir / f"losses-{name}.png", losses_csv, caption)
            )
    return emitted


def collect_bundle(experiment_dirs: list) -> ReportBundle:
    """Build a report bundle from completed experiment directories.

    Each directory must contain the manifest.yaml written by a finished
    experiment run; figures are annotated with seed and checkpoint hash.
    """
    bundle = ReportBundle()
    found_runs = False
    for exp_dir in experiment_dirs:
        exp_dir = Path(exp_dir)
        manifest_path = exp_dir / "manifest.yaml"
        if not manifest_path.exists():
            continue
        manifest = yaml.safe_load(manifest_path.read_text())
        aggregate = manifest.get("aggregate") or {}
        bundle.rows.append(
            {
                "shift": manifest.get("shift_label") or manifest.get("experiment", ""),
                "method": manifest.get("method", ""),
                "mean_accuracy": aggregate.get("mean"),
                "stderr": aggregate.get("stderr"),
            }
        )
        for run in manifest.get("runs", []):
            if run.get("error") or not run.get("stages"):
                continue
            found_runs = True
            seed = run["seed"]
            last_stage = run["stages"][-1]["stage"]
            run_dir = exp_dir / f"seed-{seed}" / last_stage
            name = f"{manifest.get('experiment', exp_dir.name)}-seed{seed}"
            caption = _trace_caption(run_dir, seed)
            metrics_path = run_dir / "metrics.json"
            if metrics_path.exists():
                metrics = json.loads(metrics_path.read_text())
                if "confusion" in metrics:
                    bundle.confusion_sources.append(
                        (np.asarray(metrics["confusion"]), caption, name)
                    )
            losses_csv = run_dir / "losses.csv"
            if losses_csv.exists():
                bundle.loss_sources.append((losses_csv, caption, name))
            triples = sorted((exp_dir / f"seed-{seed}" / "pixel-adapt" / "triples").glob(
                "epoch-*.png"), key=lambda p: int(p.stem.split("-")[1]))
            if triples:
                bundle.triple_sources.append((triples[-1], name))
    if not bundle.rows or not found_runs:
        raise ReportError(
            "no completed runs found under: " + ", ".join(str(d) for d in experiment_dirs)
        )
    return bundle


def _trace_caption(run_dir: Path, seed: int) -> str:
    from .models import checkpoint_hash

    ckpts = sorted((run_dir / "checkpoint").glob("*.ckpt")) if (run_dir / "checkpoint").exists() else []
    if ckpts:
        return f"seed={seed} ckpt={checkpoint_hash(ckpts[0])[:12]}"
    return f"seed={seed}"
