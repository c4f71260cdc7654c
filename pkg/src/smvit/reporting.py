"""Run artifacts: line-delimited metrics records, comma-separated
per-view accuracy tables, and matplotlib figures rendered next to them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .training import AblationReport, EpochMetrics


def write_metrics_jsonl(metrics, path):
    """One JSON record per epoch, schema == EpochMetrics fields."""
    lines = []
    for em in metrics:
        lines.append(json.dumps({
            "stage": em.stage,
            "epoch": em.epoch,
            "views_active": list(em.views_active),
            "train_loss": em.train_loss,
            "val_accuracy_per_view": {str(k): v for k, v in em.val_accuracy_per_view.items()},
            "wall_time_s": em.wall_time_s,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_jsonl(path):
    metrics = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        metrics.append(EpochMetrics(
            stage=rec["stage"],
            epoch=rec["epoch"],
            views_active=rec["views_active"],
            train_loss=rec["train_loss"],
            val_accuracy_per_view={int(k): v for k, v in rec["val_accuracy_per_view"].items()},
            wall_time_s=rec["wall_time_s"],
        ))
    return metrics


def write_view_table_csv(acc_by_view, path):
    """One header row of view angles and one row of accuracies, matching
    the customary 11-column per-view comparison layout."""
    views = sorted(acc_by_view)
    header = ",".join(f"{v}deg" for v in views)
    row = ",".join(f"{acc_by_view[v]:.4f}" for v in views)
    Path(path).write_text(header + "\n" + row + "\n")


def write_ablation_csv(report: AblationReport, path):
    lines = ["view,initial_base,initial_gradual,max_base,max_gradual,initial_delta,max_delta"]
    for r in report.rows:
        lines.append(
            f"{r.view},{r.initial_base:.4f},{r.initial_gradual:.4f},"
            f"{r.max_base:.4f},{r.max_gradual:.4f},"
            f"{r.initial_delta:+.4f},{r.max_delta:+.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# figures
# ---------------------------------------------------------------------------

def plot_loss_curve(metrics, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    losses = [em.train_loss for em in metrics]
    ax.plot(range(1, len(losses) + 1), losses, marker="o", ms=3)
    for i in range(1, len(metrics)):
        if metrics[i].stage != metrics[i - 1].stage:
            ax.axvline(i + 0.5, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("epoch (stage boundaries dashed)")
    ax.set_ylabel("train loss")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_view_accuracy(acc_by_view, path, title="Validation accuracy per view"):
    views = sorted(acc_by_view)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([str(v) for v in views], [acc_by_view[v] for v in views], color="#4878cf")
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("view angle (deg)")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_accuracy_curves(metrics, path):
    views = sorted(metrics[0].val_accuracy_per_view)
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(1, len(metrics) + 1)
    for v in views:
        ax.plot(xs, [em.val_accuracy_per_view.get(v, float("nan")) for em in metrics],
                label=f"{v} deg")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Per-view validation accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(report: AblationReport, path):
    rows = report.rows
    views = [str(r.view) for r in rows]
    x = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar([i - width / 2 for i in x], [r.initial_base for r in rows], width,
           label="initial (base)", color="#c44e52")
    ax.bar([i + width / 2 for i in x], [r.initial_gradual for r in rows], width,
           label="initial (gradual)", color="#4878cf")
    ax.plot(x, [r.max_base for r in rows], "s--", color="#c44e52", label="max (base)")
    ax.plot(x, [r.max_gradual for r in rows], "o-", color="#4878cf", label="max (gradual)")
    ax.set_xticks(list(x), views)
    ax.set_xlabel("view angle (deg)")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Curriculum vs single-stage training")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
