"""Render report and sweep figures to files (PNG, Agg backend).

The delimited output remains the contract; figures are the human-friendly
rendering written alongside it.
"""

from __future__ import annotations

import os
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}

_METRIC_LABELS = {
    "generation_speed": "generation speed (tokens/s)",
    "ttft": "time to first token (s)",
    "itl": "inter-token latency (s)",
    "acceptance_rate": "acceptance rate",
    "cancelled_runs": "cancelled runs",
    "inflight_mean": "mean in-flight runs",
}

REPORT_METRICS = ("generation_speed", "ttft", "itl", "acceptance_rate")
SWEEP_METRICS = ("generation_speed", "ttft", "itl", "acceptance_rate",
                 "cancelled_runs", "inflight_mean")


def _save(fig, outdir: str, name: str) -> str:
    path = os.path.join(outdir, name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_report_figures(report, outdir: str, prefix: str = "report") -> List[str]:
    """Per-repetition bars with the mean marked, one figure per metric."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    reps = list(range(len(report.runs)))
    with plt.rc_context(_STYLE):
        for metric in REPORT_METRICS:
            values = [getattr(m, metric) for m in report.runs]
            fig, ax = plt.subplots()
            ax.bar(reps, values, color="#4878a8")
            ax.axhline(report.mean[metric], color="#b04030", lw=1.2,
                       label=f"mean = {report.mean[metric]:.4g}")
            ax.set_xlabel("repetition")
            ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
            ax.set_title(f"{report.config.mode}: {metric}")
            ax.legend(loc="best")
            written.append(_save(fig, outdir, f"{prefix}_{metric}.png"))
    return written


def render_sweep_figures(reports: Sequence, param: str, outdir: str,
                         prefix: str = "sweep") -> List[str]:
    """Mean metric vs swept value, grouped by mode."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    by_mode: Dict[str, list] = {}
    for rep in reports:
        by_mode.setdefault(rep.config.mode, []).append(rep)
    with plt.rc_context(_STYLE):
        for metric in SWEEP_METRICS:
            fig, ax = plt.subplots()
            for mode, reps in sorted(by_mode.items()):
                xs = [getattr(r.config, param) for r in reps]
                ys = [r.mean[metric] for r in reps]
                if param == "mode":
                    ax.bar([str(x) for x in xs], ys, label=mode)
                else:
                    ax.plot(xs, ys, marker="o", label=mode)
            ax.set_xlabel(param)
            ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
            ax.set_title(f"{metric} vs {param}")
            if len(by_mode) > 1:
                ax.legend(loc="best")
            written.append(_save(fig, outdir, f"{prefix}_{metric}.png"))
    return written
