from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from .errors import MissingMetricError  # noqa: E402
from .evaluation import VARIANCE_LEVEL  # noqa: E402
from .models import MetricReport, RunManifest  # noqa: E402
from .report import OBJECTIVE_LABELS, STRATEGY_LABELS, report_of  # noqa: E402

logger = logging.getLogger(__name__)

NMC_BARS = (
    ("nmc_after_first", "after first task"),
    ("nmc_stale", "stale prototypes"),
    ("nmc_upper", "recomputed (upper bound)"),
)
FIGURE_FILES = {
    "knn": "knn_accumulation.png",
    "spectra": "spectra.png",
    "nmc": "nmc_stability.png",
    "summary": "two_task_summary.png",
}


def method_label(report: MetricReport) -> str:
    obj = OBJECTIVE_LABELS.get(report.objective, report.objective)
    strat = STRATEGY_LABELS.get(report.strategy, report.strategy)
    return f"{obj} / {strat}"


def _final(report: MetricReport) -> int:
    return report.n_tasks - 1


def _save(fig: Figure, path: str | Path | None) -> None:
    if path is None:
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(p, dpi=150, bbox_inches="tight")
    logger.info("figure_saved", extra={"path": str(p)})


def knn_accumulation_figure(
    reports: Sequence[MetricReport], path: str | Path | None = None
) -> Figure:
    """Task-agnostic k-NN accuracy after each task, one curve per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        xs, means, stds = [], [], []
        for b in range(rep.n_tasks):
            agg = rep.aggregate("knn_task_agnostic", boundary=b)
            if agg is None:
                plt.close(fig)
                raise MissingMetricError(f"{rep.experiment}: no knn_task_agnostic at boundary {b}")
            xs.append(b + 1)
            means.append(agg.mean)
            stds.append(agg.std)
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, label=method_label(rep))
    ax.set_xlabel("Tasks learned")
    ax.set_ylabel("Task-agnostic k-NN accuracy (%)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return fig


def mean_cumulative(report: MetricReport, boundary: int) -> np.ndarray:
    entries = [s for s in report.spectra if s.boundary == boundary]
    if not entries:
        raise MissingMetricError(f"{report.experiment}: no spectrum at boundary {boundary}")
    return np.mean([np.asarray(e.spectrum.cumulative) for e in entries], axis=0)


def var95_of(cumulative: np.ndarray) -> int:
    return int(np.argmax(cumulative >= VARIANCE_LEVEL - 1e-12)) + 1


def spectra_figure(
    reports: Sequence[MetricReport],
    path: str | Path | None = None,
    *,
    boundary: int | None = None,
) -> Figure:
    """Cumulative explained variance with a dashed line at the 95% index of each method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        b = _final(rep) if boundary is None else boundary
        if not any(s.boundary == b for s in rep.spectra):
            plt.close(fig)
            raise MissingMetricError(f"{rep.experiment}: no spectrum at boundary {b}")
        cum = mean_cumulative(rep, b)
        ks = np.arange(1, cum.size + 1)
        (line,) = ax.plot(ks, cum, label=method_label(rep))
        ax.axvline(var95_of(cum), color=line.get_color(), linestyle="--", linewidth=1)
    ax.axhline(VARIANCE_LEVEL, color="gray", linestyle=":", linewidth=1)
    ax.set_xscale("log")
    ax.set_xlabel("Number of leading eigenvalues")
    ax.set_ylabel("Cumulative explained variance")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return fig


def nmc_figure(
    reports: Sequence[MetricReport],
    path: str | Path | None = None,
    *,
    boundary: int | None = None,
) -> Figure:
    """Grouped bars per method: NMC after the first task, with stale and recomputed prototypes."""
    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(reports)), 4))
    width = 0.8 / len(NMC_BARS)
    x = np.arange(len(reports))
    chance: list[float] = []
    values: dict[str, list[float]] = defaultdict(list)
    for rep in reports:
        b = _final(rep) if boundary is None else boundary
        for metric, _ in NMC_BARS:
            agg = rep.aggregate(metric, boundary=b, task_id=0)
            if agg is None:
                plt.close(fig)
                raise MissingMetricError(f"{rep.experiment}: no {metric} at boundary {b}")
            values[metric].append(agg.mean)
        c = rep.aggregate("nmc_chance", boundary=b, task_id=0)
        if c is not None:
            chance.append(c.mean)
    for i, (metric, label) in enumerate(NMC_BARS):
        offset = x + (i - 1) * width
        ax.bar(offset, values[metric], width, label=label, edgecolor="black", linewidth=0.5)
    if chance:
        level = float(np.mean(chance))
        ax.axhline(level, color="gray", linestyle=":", linewidth=1.5, label="random guess")
    ax.set_xticks(x)
    ax.set_xticklabels([method_label(r) for r in reports], fontsize=8)
    ax.set_ylabel("NMC accuracy on the first task (%)")
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return fig


def two_task_summary(reports: Sequence[MetricReport]) -> dict[str, tuple[float, float]]:
    """Per method, task-aware accuracy on the first and second task after the final task,
    averaged over all scenarios (reports) of that method."""
    acc: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for rep in reports:
        b = _final(rep)
        first = rep.aggregate("knn_task_aware", boundary=b, task_id=0)
        second = rep.aggregate("knn_task_aware", boundary=b, task_id=1)
        if first is None or second is None:
            raise MissingMetricError(f"{rep.experiment}: needs task-aware accuracy on two tasks")
        acc[method_label(rep)].append((first.mean, second.mean))
    return {
        label: (float(np.mean([a for a, _ in pairs])), float(np.mean([b for _, b in pairs])))
        for label, pairs in sorted(acc.items())
    }


def two_task_summary_figure(
    reports: Sequence[MetricReport], path: str | Path | None = None
) -> Figure:
    summary = two_task_summary(reports)
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, (first, second) in summary.items():
        ax.scatter([first], [second], s=40)
        ax.annotate(label, (first, second), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel("Accuracy on first task (%)")
    ax.set_ylabel("Accuracy on second task (%)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
    return fig


def emit_figures(
    manifests: Sequence[RunManifest],
    out_dir: str | Path,
    *,
    kinds: Sequence[str] | None = None,
) -> list[Path]:
    """Write figures for completed runs. Explicit `kinds` must all be producible; the default set
    leaves out NMC and the two-task summary when some run has a single task."""
    reports = [report_of(m) for m in manifests]
    if kinds is None:
        kinds = ["knn", "spectra"]
        if reports and all(r.n_tasks >= 2 for r in reports):
            kinds += ["nmc", "summary"]
    builders = {
        "knn": knn_accumulation_figure,
        "spectra": spectra_figure,
        "nmc": nmc_figure,
        "summary": two_task_summary_figure,
    }
    out = Path(out_dir)
    paths: list[Path] = []
    for kind in kinds:
        if kind not in builders:
            raise ValueError(f"unknown figure kind {kind!r}; choose from {sorted(builders)}")
        path = out / FIGURE_FILES[kind]
        fig = builders[kind](reports, path)
        plt.close(fig)
        paths.append(path)
    return paths
