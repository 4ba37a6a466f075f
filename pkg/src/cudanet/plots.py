"""Figure helpers: gap-decomposition bars, training curves, ablation bars."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .uncertainty import GapReport  # noqa: E402


def plot_gap_reports(reports: Sequence[GapReport], path: Path) -> Path:
    """Bar chart of per-domain MVV and the derived gaps, one group per report."""
    reports = list(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))

    width = 0.8 / max(len(reports), 1)
    domains = ("s", "m", "t")
    gaps = ("style", "fog", "dual")
    for i, rep in enumerate(reports):
        offs = i * width
        mvvs = [rep.mvv_s, rep.mvv_m, rep.mvv_t]
        gvals = [rep.gap_style, rep.gap_fog, rep.gap_dual]
        axes[0].bar([j + offs for j in range(3)], mvvs, width=width, label=rep.model)
        axes[1].bar([j + offs for j in range(3)], gvals, width=width, label=rep.model)
    axes[0].set_xticks(range(3), [f"domain {d}" for d in domains])
    axes[0].set_ylabel("mean variance value")
    axes[0].set_title("uncertainty per domain")
    axes[1].set_xticks(range(3), [f"{g} gap" for g in gaps])
    axes[1].set_title("gap decomposition")
    axes[1].axhline(0.0, color="k", linewidth=0.5)
    if len(reports) > 1:
        axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(log_paths: Sequence[Path], path: Path) -> Path:
    """Loss components over steps for one or more JSONL training logs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for log_path in log_paths:
        log_path = Path(log_path)
        if not log_path.exists():
            continue
        steps, losses = [], []
        with log_path.open() as fh:
            for line in fh:
                rec = json.loads(line)
                steps.append(rec["step"])
                losses.append(rec.get("loss", rec.get("final", 0.0)))
        if steps:
            ax.plot(steps, losses, label=log_path.stem)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(results: dict, path: Path) -> Path:
    """Bar chart of target-domain mIoU per pipeline arm."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = list(results.keys())
    values = [results[n] for n in names]
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("target mIoU")
    for i, v in enumerate(values):
        ax.text(i, v + 0.005, f"{v:.3f}", ha="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
