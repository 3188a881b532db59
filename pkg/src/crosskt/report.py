"""Figures and delimited tables for run outputs.

Every figure is rendered headlessly to a file next to the corresponding
TSV, so runs on servers and CI leave the same artifacts as local ones.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import DataError


def save_table(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    """Tab-separated table; floats keep six fractional digits."""
    def fmt(v):
        if isinstance(v, float):
            return format(v, ".6f")
        if v is None:
            return "undefined"
        return str(v)

    lines = ["\t".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise DataError(f"row has {len(row)} cells for {len(header)} "
                            f"columns")
        lines.append("\t".join(fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def history_rows(history: Sequence) -> tuple[list, list]:
    """Flatten per-epoch stats into table cells."""
    courses = sorted(history[0].val_auc) if history else []
    header = ["epoch", "train_loss"] + \
        [f"val_auc_{c}" for c in courses] + \
        [f"val_acc_{c}" for c in courses] + ["val_metric", "improved"]
    rows = []
    for s in history:
        rows.append([s.epoch, s.train_loss] +
                    [s.val_auc[c] for c in courses] +
                    [s.val_acc[c] for c in courses] +
                    [s.val_metric, "yes" if s.improved else "no"])
    return header, rows


def write_history_table(path, history: Sequence) -> None:
    header, rows = history_rows(history)
    save_table(path, header, rows)


def training_curves_figure(path, history: Sequence) -> None:
    """Loss on the left axis, validation AUC per course on the right."""
    if not history:
        raise DataError("no epochs to plot")
    epochs = [s.epoch for s in history]
    fig, ax_loss = plt.subplots(figsize=(7.0, 4.0))
    ax_loss.plot(epochs, [s.train_loss for s in history],
                 color="tab:red", marker="o", markersize=3,
                 label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss", color="tab:red")
    ax_loss.tick_params(axis="y", labelcolor="tab:red")

    ax_auc = ax_loss.twinx()
    for course in sorted(history[0].val_auc):
        ys = [s.val_auc[course] for s in history]
        xs = [e for e, y in zip(epochs, ys) if y is not None]
        ys = [y for y in ys if y is not None]
        ax_auc.plot(xs, ys, marker="s", markersize=3,
                    label=f"val AUC {course}")
    best = [s.epoch for s in history if s.improved]
    if best:
        ax_auc.axvline(best[-1], color="gray", linestyle=":",
                       linewidth=1, label="best epoch")
    ax_auc.set_ylabel("validation AUC")
    ax_auc.set_ylim(0.0, 1.0)

    handles1, labels1 = ax_loss.get_legend_handles_labels()
    handles2, labels2 = ax_auc.get_legend_handles_labels()
    ax_auc.legend(handles1 + handles2, labels1 + labels2,
                  loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def eval_metrics_figure(path, report) -> None:
    """Per-course ACC and AUC bars with the macro mean marked."""
    if not report.courses:
        raise DataError("no courses to plot")
    names = [m.course for m in report.courses]
    x = range(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(names), 4.0))
    aucs = [m.auc if m.auc is not None else 0.0 for m in report.courses]
    bars = ax.bar([i - width / 2 for i in x], aucs, width,
                  color="tab:blue", label="AUC")
    for bar, m in zip(bars, report.courses):
        label = "n/a" if m.auc is None else format(m.auc, ".3f")
        ax.annotate(label, (bar.get_x() + bar.get_width() / 2,
                            bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    bars = ax.bar([i + width / 2 for i in x],
                  [m.acc for m in report.courses], width,
                  color="tab:orange", label="ACC")
    for bar, m in zip(bars, report.courses):
        ax.annotate(format(m.acc, ".3f"),
                    (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    if report.mean_auc is not None:
        ax.axhline(report.mean_auc, color="tab:blue", linestyle="--",
                   linewidth=1, label=f"mean AUC {report.mean_auc:.3f}")
    ax.axhline(0.5, color="gray", linestyle=":", linewidth=1)
    ax.set_xticks(list(x), names)
    ax.set_ylabel("held-out metric")
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_rows(results: Mapping) -> tuple[list, list]:
    header = ["variant", "test_mean_auc", "best_epoch", "epochs_trained"]
    rows = []
    for variant, entry in results.items():
        rows.append([variant, entry.report.mean_auc,
                     entry.result.best_epoch, len(entry.result.history)])
    return header, rows


def write_ablation_table(path, results: Mapping) -> None:
    header, rows = ablation_rows(results)
    save_table(path, header, rows)


def ablation_bars_figure(path, results: Mapping) -> None:
    """Mean test AUC per variant."""
    if not results:
        raise DataError("no variants to plot")
    names = list(results)
    values = [results[n].report.mean_auc for n in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 4.0))
    shown = [v if v is not None else 0.0 for v in values]
    bars = ax.bar(names, shown, color="tab:blue")
    for bar, value in zip(bars, values):
        label = "n/a" if value is None else format(value, ".3f")
        ax.annotate(label, (bar.get_x() + bar.get_width() / 2,
                            bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("test mean AUC")
    ax.set_ylim(0.0, 1.05)
    ax.axhline(0.5, color="gray", linestyle=":", linewidth=1)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
