"""Figure rendering for evaluation reports and training diagnostics.

Every report path writes PNG figures next to the JSON/CSV artifacts so a run
can be reviewed without re-loading anything.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def render_report_figures(report: EvalReport, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ks = sorted(report.a_at)
    ax.bar([f"A@{k}" for k in ks], [report.a_at[k] for k in ks], color="#4878a8", width=0.55)
    ax.axhline(report.avg_a5, color="#c44e52", linestyle="--", linewidth=1, label=f"Avg A@5 = {report.avg_a5:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("Top-K localization accuracy")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = out_dir / "topk_accuracy.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ranks = [rank for _, rank in report.per_case]
    if ranks:
        bins = range(1, max(ranks) + 2)
        ax.hist(ranks, bins=bins, color="#6aa56a", edgecolor="white", align="left")
    ax.set_xlabel("rank of true root cause")
    ax.set_ylabel("cases")
    ax.set_title("Ground-truth rank distribution")
    fig.tight_layout()
    path = out_dir / "rank_histogram.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def render_loss_curve(losses: Sequence[float], path: Path, title: str = "training loss") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(range(len(losses)), losses, color="#4878a8", linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_ablation_chart(reports: Mapping[str, EvalReport], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(reports)
    fig, ax = plt.subplots(figsize=(6, 3.4))
    x = range(len(names))
    width = 0.35
    ax.bar([i - width / 2 for i in x], [reports[n].a_at[1] for n in names], width, label="A@1", color="#4878a8")
    ax.bar([i + width / 2 for i in x], [reports[n].avg_a5 for n in names], width, label="Avg A@5", color="#c44e52")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15, fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Ablation comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
