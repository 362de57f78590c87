"""Figure rendering for the report path.

When a report is written to disk the CLI also renders a matplotlib figure
next to the delimited output (same stem, .png).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .profiler import MB  # noqa: E402


def plot_profile(report, path: str) -> None:
    """Per-layer saved-activation bytes and FLOPs as paired bar charts."""
    rows = [r for r in report.rows]
    labels = [r.layer_id for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(max(6, 0.45 * len(rows)), 7),
                                   sharex=True)
    ax1.bar(labels, [r.saved_act_bytes / MB for r in rows], color="#d95f02")
    ax1.set_ylabel("stored activations (MB)")
    ax1.set_title(f"profile: {report.policy_preset}  input={report.input_shape}")
    ax2.bar(labels, [r.fwd_flops / 1e6 for r in rows], label="forward",
            color="#7570b3")
    ax2.bar(labels, [r.bwd_flops / 1e6 for r in rows],
            bottom=[r.fwd_flops / 1e6 for r in rows], label="backward",
            color="#1b9e77")
    ax2.set_ylabel("MFLOPs")
    ax2.legend()
    plt.setp(ax2.get_xticklabels(), rotation=90, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_compare(rows, path: str) -> None:
    """Strategy comparison: memory and total FLOPs, one bar group per policy."""
    names = [r["policy"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.bar(names, [r["saved_act_mb"] for r in rows], color="#d95f02")
    ax1.set_ylabel("stored activations (MB)")
    ax2.bar(names, [r["total_mflops"] for r in rows], color="#7570b3")
    ax2.set_ylabel("training MFLOPs")
    for ax in (ax1, ax2):
        plt.setp(ax.get_xticklabels(), rotation=30, ha="right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_divergence(report, path: str) -> None:
    """Twin-training weight drift per step against the evaluated bound."""
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = range(1, len(report.per_step_distance) + 1)
    ax.plot(steps, report.per_step_distance, label="||W~ - W|| per step")
    ax.axhline(report.bound, color="red", linestyle="--",
               label=f"bound = {report.bound:.3g}")
    ax.set_xlabel("step")
    ax.set_ylabel("Frobenius distance")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(report, path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(report.step_losses)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
