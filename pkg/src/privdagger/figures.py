"""Figure rendering for run reports (written next to the delimited output)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .analysis import MetricsReport


def save_metrics_figure(report: MetricsReport, path) -> None:
    """Two panels: performance per iteration, and the gap diagnostics."""
    rows = report.rows
    iters = [r.iteration for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.4))

    ax1.errorbar(iters, [r.success_rate for r in rows],
                 yerr=[r.success_se for r in rows],
                 marker="o", color="tab:blue", label="success rate")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("success rate", color="tab:blue")
    ax1.set_ylim(-0.02, 1.02)
    ax1b = ax1.twinx()
    ax1b.errorbar(iters, [r.j for r in rows], yerr=[r.j_se for r in rows],
                  marker="s", color="tab:orange", label="J")
    ax1b.set_ylabel("expected return J", color="tab:orange")
    ax1.set_title(report.metadata.get("spec_name", ""))

    ax2.plot(iters, [r.imitation_gap for r in rows], marker="o", label="imitation gap")
    ax2.plot(iters, [r.realizability_gap for r in rows], marker="s",
             label=f"realizability ({rows[0].realizability_method})")
    ax2.plot(iters, [r.measured_regret for r in rows], marker="^", label="regret")
    ax2.set_xlabel("iteration")
    ax2.legend(fontsize=8)
    ax2.set_title("diagnostics")

    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_tradeoff_figure(param_name: str, values, successes, errors, path) -> None:
    """Final success rate across the swept parameter."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xs = range(len(values))
    ax.errorbar(xs, successes, yerr=errors, marker="o")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{v:g}" if isinstance(v, float) else str(v) for v in values],
                       rotation=30)
    ax.set_xlabel(param_name)
    ax.set_ylabel("final success rate")
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
