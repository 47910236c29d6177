"""Report figures rendered next to the delimited outputs: training loss
curves for the train path, a metric summary for the eval path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .losses import LossBreakdown
from .metrics import REPORT_COLUMNS, MetricReport

_PNG_META = {"Software": "hitdvae"}


def loss_figure(history: list[LossBreakdown], path) -> None:
    """Total plus per-term loss curves over steps, log scale."""
    steps = np.arange(len(history))
    fig, ax = plt.subplots(figsize=(9, 5))
    ax.plot(steps, [b.total for b in history], label="total", color="black", lw=2)
    for term in LossBreakdown.TERMS:
        vals = np.array([getattr(b, term) for b in history])
        if np.any(vals > 0):
            ax.plot(steps, vals, label=term, lw=1, alpha=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted loss")
    ax.legend(fontsize=8, ncol=2)
    ax.set_title("training loss breakdown")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def metrics_figure(report: MetricReport, path) -> None:
    """Bar chart of the report's metric columns."""
    values = [getattr(report, c) for c in REPORT_COLUMNS]
    fig, ax = plt.subplots(figsize=(9, 4))
    bars = ax.bar(REPORT_COLUMNS, values, color="#4878a8")
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(), f"{v:.3g}",
                ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("value")
    ax.set_title(f"evaluation metrics ({report.n_sequences} sequences, "
                 f"K={report.k_samples})")
    plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
