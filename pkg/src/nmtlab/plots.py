"""Figure rendering for evaluation reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import HIST_CENTERS, EvalReport


def plot_delta_histogram(report: EvalReport, path) -> None:
    """Bar chart of the per-sentence chrF delta distribution for one report."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(HIST_CENTERS, report.delta_histogram, width=8.0, color="#4878cf")
    ax.axvline(report.mean_delta_chrf, color="#d65f5f", linestyle="--",
               label=f"mean = {report.mean_delta_chrf:.2f}")
    ax.set_xlabel("delta chrF (noisy - clean)")
    ax.set_ylabel("sentences")
    ax.set_title(f"{report.model} / {report.noise_kind} on {report.test_set}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_mean_deltas(reports: list[EvalReport], path) -> None:
    """Grouped bars of mean delta chrF per noise kind, one group per model."""
    models = sorted({r.model for r in reports})
    kinds = sorted({r.noise_kind for r in reports})
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(kinds), 4))
    width = 0.8 / max(len(models), 1)
    for mi, model in enumerate(models):
        xs, ys = [], []
        for ki, kind in enumerate(kinds):
            sel = [r for r in reports if r.model == model and r.noise_kind == kind]
            if sel:
                xs.append(ki + mi * width)
                ys.append(sel[0].mean_delta_chrf)
        ax.bar(xs, ys, width=width, label=model)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks([k + width * (len(models) - 1) / 2 for k in range(len(kinds))])
    ax.set_xticklabels(kinds)
    ax.set_ylabel("mean delta chrF")
    ax.set_title("Noise impact per model (closer to zero = more robust)")
    if models:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
