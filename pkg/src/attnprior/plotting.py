"""Figure rendering for reports (headless; files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

VARIANT_STYLES = {
    "baseline": {"color": "tab:gray", "marker": "o"},
    "guided": {"color": "tab:blue", "marker": "s"},
}


def plot_sweep_curves(rows, out_path, metric="accuracy"):
    """Accuracy-vs-supervision-fraction curves, one line per variant.

    Points are means over seeds with min/max whiskers.
    """
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    variants = sorted({row["variant"] for row in rows})
    for variant in variants:
        grouped = {}
        for row in rows:
            if row["variant"] == variant:
                grouped.setdefault(float(row["fraction"]), []).append(float(row[metric]))
        fracs = sorted(grouped)
        means = np.array([np.mean(grouped[f]) for f in fracs])
        lo = means - np.array([np.min(grouped[f]) for f in fracs])
        hi = np.array([np.max(grouped[f]) for f in fracs]) - means
        style = VARIANT_STYLES.get(variant, {})
        ax.errorbar(fracs, means, yerr=[lo, hi], label=variant, capsize=3, **style)
    ax.set_xlabel("supervision fraction")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_xscale("log")
    ax.set_xticks(sorted({float(r["fraction"]) for r in rows}))
    ax.get_xaxis().set_major_formatter(matplotlib.ticker.ScalarFormatter())
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def plot_per_type_accuracy(per_type, out_path):
    """Bar chart of per-question-type accuracy for one evaluation run."""
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    names = sorted(per_type)
    ax.bar(names, [per_type[n] for n in names], color="tab:blue", width=0.6)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    for i, name in enumerate(names):
        ax.text(i, per_type[name] + 0.02, f"{per_type[name]:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
