"""Figures for training logs and ablation tables, written to files (Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.bbox": "tight",
}

KIND_COLORS = {"graph_dependent": "#1b6ca8", "feature_dependent": "#e08a2c", "history_dependent": "#5a9e4b"}


def read_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def plot_training(logs: Dict[str, Sequence[dict]], path) -> Path:
    """Loss per step (left) and dev accuracy where logged (right), one line per run."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_dev) = plt.subplots(1, 2, figsize=(9.0, 3.4))
        for name, log in logs.items():
            steps = [r["step"] for r in log]
            ax_loss.plot(steps, [r["loss"] for r in log], label=name, linewidth=1.2)
            dev = [(r["step"], r["dev_accuracy"]) for r in log if "dev_accuracy" in r]
            if dev:
                ax_dev.plot(*zip(*dev), marker="o", markersize=3, label=name, linewidth=1.2)
        ax_loss.set_yscale("log")
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("training loss")
        ax_dev.set_xlabel("step")
        ax_dev.set_ylabel("dev answer accuracy")
        ax_dev.set_ylim(0.0, 1.0)
        ax_loss.legend()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """Grouped bars: per-kind answer accuracy for each ablation row."""
    path = Path(path)
    names = [r["row"] for r in rows]
    kinds = [k for k in KIND_COLORS if any(k in r["report"]["per_kind_accuracy"] for r in rows)]
    width = 0.8 / max(len(kinds), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names) + 2), 3.6))
        for k, kind in enumerate(kinds):
            xs = [i + (k - (len(kinds) - 1) / 2) * width for i in range(len(names))]
            ys = [r["report"]["per_kind_accuracy"].get(kind, 0.0) for r in rows]
            ax.bar(xs, ys, width=width, color=KIND_COLORS[kind], label=kind.replace("_", " "))
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("test answer accuracy")
        ax.legend(ncol=len(kinds), loc="upper center", bbox_to_anchor=(0.5, 1.12))
        fig.savefig(path)
        plt.close(fig)
    return path


def render_run_dir(run_dir) -> List[Path]:
    """Re-draw every figure for an ablation output directory."""
    run_dir = Path(run_dir)
    out = []
    logs = {p.name[: -len(".log.jsonl")]: read_log(p) for p in sorted(run_dir.glob("*.log.jsonl"))}
    if logs:
        out.append(plot_training(logs, run_dir / "training.png"))
    table = run_dir / "ablation.json"
    if table.exists():
        out.append(plot_ablation(json.loads(table.read_text())["rows"], run_dir / "ablation.png"))
    return out
