"""Optional plot emission: training-loss curves and per-label DSC bars."""
from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _plot_history(history_path: str, png_path: str, title: str) -> None:
    with open(history_path) as f:
        history = json.load(f)
    if not history:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in sorted(history[0]):
        ax.plot([h[key] for h in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def plot_run(out_dir: str, variant: str) -> None:
    """Emit loss-curve and per-label bar plots for one finished run."""
    s1 = os.path.join(out_dir, "stage1", "history.json")
    if os.path.exists(s1):
        _plot_history(s1, os.path.join(out_dir, "stage1", "loss_curves.png"),
                      "registration training")
    s2 = os.path.join(out_dir, "stage2", variant, "history.json")
    if os.path.exists(s2):
        _plot_history(s2, os.path.join(out_dir, "stage2", variant, "loss_curves.png"),
                      f"distillation training ({variant})")

    report_path = os.path.join(out_dir, "stage3", variant, "report.json")
    if os.path.exists(report_path):
        with open(report_path) as f:
            report = json.load(f)["report"]
        labels = sorted(report["per_label"], key=int)
        values = [report["per_label"][k]["dsc"] for k in labels]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(labels, values)
        ax.set_xlabel("label")
        ax.set_ylabel("DSC")
        ax.set_ylim(0, 1)
        ax.set_title(f"per-label DSC ({variant})")
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "stage3", variant, "dsc_bars.png"), dpi=120)
        plt.close(fig)
