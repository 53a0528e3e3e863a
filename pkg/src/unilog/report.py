"""Delimited reports and the matplotlib figures rendered alongside them."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def write_metrics_log(history, path) -> None:
    """Line-oriented training log: step<TAB>loss<TAB>lr."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for step, loss, lr in history:
            f.write(f"{step}\t{loss:.6f}\t{lr:.8g}\n")


def write_report(values: dict, path) -> None:
    """Machine-readable key-value report, one `key<TAB>value` per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for k, v in values.items():
            f.write(f"{k}\t{v}\n")


def plot_loss_curve(history, path, title: str = "training loss") -> None:
    steps = [h[0] for h in history]
    losses = [h[1] for h in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if losses and min(losses) > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_metric_bars(report: dict, path, title: str = "evaluation") -> None:
    keys = [k for k in ("precision", "recall", "f1") if k in report]
    vals = [float(report[k]) for k in keys]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.bar(keys, vals, color=["#4878d0", "#ee854a", "#6acc64"][: len(keys)])
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center", fontsize=9)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_score_histogram(normal_scores, anomalous_scores, threshold, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(normal_scores, bins=40, alpha=0.6, label="normal")
    if anomalous_scores:
        ax.hist(anomalous_scores, bins=40, alpha=0.6, label="anomalous")
    ax.axvline(threshold, color="k", ls="--", lw=1, label="threshold")
    ax.set_xlabel("reconstruction score")
    ax.set_ylabel("windows")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
