"""Evaluation of trained parameters: Average / Worst / CVaR metrics over a
task set, loss histograms, the (amplitude, phase) adaptation-loss
landscape, and cross-run comparison tables. All files round-trip exactly
(floats are serialized with full precision).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .autodiff import ParamVector
from .models import ACT_CODES, AnySpec, CNPSpec, ModelSpec, cnp_forward, gaussian_nll
from .risk import RiskBatch, cvar_estimate
from .tasks import EVAL_STREAM, SineTask, TaskData, sample_task_data, task_rng

Array = np.ndarray

_TOL = 1e-12


@dataclass(frozen=True)
class MetricsReport:
    average: float
    worst: float
    cvar: float
    alpha_eval: float
    n_tasks: int
    per_task_losses: tuple[float, ...]

    def __post_init__(self):
        if not self.average <= self.cvar + _TOL:
            raise ValueError("tail mean below average")
        if not self.cvar <= self.worst + _TOL:
            raise ValueError("tail mean above worst case")
        if len(self.per_task_losses) != self.n_tasks:
            raise ValueError("per-task losses inconsistent with n_tasks")


def metrics_from_losses(losses: Sequence[float], alpha_eval: float) -> MetricsReport:
    batch = RiskBatch.from_losses(losses)
    return MetricsReport(
        average=float(batch.losses.mean()),
        worst=float(batch.losses.max()),
        cvar=cvar_estimate(batch, alpha_eval),
        alpha_eval=float(alpha_eval),
        n_tasks=batch.size,
        per_task_losses=tuple(float(x) for x in batch.losses),
    )


def evaluate_metrics(
    spec: AnySpec,
    params: ParamVector,
    tasks: Sequence,
    *,
    k_shots: int,
    m_targets: int,
    alpha_eval: float,
    seed: int,
    inner_lr: float | None = None,
) -> MetricsReport:
    """Per-task post-adaptation losses over an evaluation set.

    MLP tasks are ``SineTask``s: context/target points are drawn per
    (seed, task index), followed by one inner gradient step and the target
    MSE. CNP tasks are pre-sampled ``TaskData``: conditioning on the
    context is the adaptation, the loss is the mean target NLL.
    """
    if len(tasks) == 0:
        raise ValueError("evaluation task set must be non-empty")
    losses = np.empty(len(tasks))
    if isinstance(spec, ModelSpec):
        if inner_lr is None:
            raise ValueError("inner_lr is required for one-step adaptation")
        widths = spec.layer_widths
        act = ACT_CODES[spec.activation]
        for i, task in enumerate(tasks):
            rng = task_rng(seed, EVAL_STREAM, i)
            data = sample_task_data(task, k_shots, m_targets, rng)
            try:
                _, losses[i] = kernels.mlp_adapt_eval(
                    params.values, widths, act,
                    data.context_x, data.context_y,
                    data.target_x, data.target_y, inner_lr,
                )
            except Exception as exc:
                raise RuntimeError(f"evaluation failed for task {i}: {exc}") from exc
    else:
        for i, data in enumerate(tasks):
            try:
                mean, var = cnp_forward(
                    spec, params, data.context_x, data.context_y, data.target_x
                )
                losses[i] = float(gaussian_nll(mean, var, data.target_y).mean())
            except Exception as exc:
                raise RuntimeError(f"evaluation failed for task {i}: {exc}") from exc
    return metrics_from_losses(losses, alpha_eval)


# --- histograms -----------------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    bin_edges: Array
    counts: Array
    total: int

    def __post_init__(self):
        edges = np.ascontiguousarray(self.bin_edges, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing")
        if counts.sum() != self.total:
            raise ValueError("histogram counts do not conserve the total")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)


def histogram(losses: Sequence[float], n_bins: int, value_range: tuple[float, float]) -> Histogram:
    """Uniform bins over value_range; out-of-range samples land in the end
    bins so counts always conserve the total."""
    lo, hi = value_range
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if not hi > lo:
        raise ValueError("range max must exceed min")
    x = np.asarray(losses, dtype=np.float64)
    width = (hi - lo) / n_bins
    idx = np.clip(np.floor((x - lo) / width).astype(np.int64), 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    return Histogram(
        bin_edges=np.linspace(lo, hi, n_bins + 1), counts=counts, total=int(x.size)
    )


def default_histogram(pooled_losses: Sequence[float], n_bins: int = 30) -> Histogram:
    """30 bins over [0, 99th percentile] by convention."""
    x = np.asarray(pooled_losses, dtype=np.float64)
    hi = float(np.percentile(x, 99))
    lo = min(0.0, float(x.min()))
    if hi <= lo:
        hi = lo + 1.0
    return histogram(x, n_bins, (lo, hi))


# --- adaptation-loss landscape -----------------------------------------------------


@dataclass(frozen=True)
class LandscapeGrid:
    amplitude_axis: Array
    phase_axis: Array
    mse: Array

    def __post_init__(self):
        a = np.ascontiguousarray(self.amplitude_axis, dtype=np.float64)
        b = np.ascontiguousarray(self.phase_axis, dtype=np.float64)
        m = np.ascontiguousarray(self.mse, dtype=np.float64)
        if m.shape != (a.size, b.size):
            raise ValueError("mse matrix shape must match the axes")
        if np.any(m < 0):
            raise ValueError("MSE entries must be non-negative")
        object.__setattr__(self, "amplitude_axis", a)
        object.__setattr__(self, "phase_axis", b)
        object.__setattr__(self, "mse", m)


def landscape(
    spec: ModelSpec,
    params: ParamVector,
    amplitude_axis: Sequence[float],
    phase_axis: Sequence[float],
    *,
    k_shots: int,
    m_targets: int,
    inner_lr: float,
    seed: int,
) -> LandscapeGrid:
    """Post-adaptation target MSE per (amplitude, phase); task index
    (i * len(phase_axis) + j) matches the evaluation grid ordering."""
    a_axis = np.asarray(amplitude_axis, dtype=np.float64)
    b_axis = np.asarray(phase_axis, dtype=np.float64)
    if a_axis.size == 0 or b_axis.size == 0:
        raise ValueError("landscape axes must be non-empty")
    widths = spec.layer_widths
    act = ACT_CODES[spec.activation]
    mse = np.empty((a_axis.size, b_axis.size))
    for i, a in enumerate(a_axis):
        for j, b in enumerate(b_axis):
            rng = task_rng(seed, EVAL_STREAM, i * b_axis.size + j)
            data = sample_task_data(SineTask(float(a), float(b)), k_shots, m_targets, rng)
            _, mse[i, j] = kernels.mlp_adapt_eval(
                params.values, widths, act,
                data.context_x, data.context_y,
                data.target_x, data.target_y, inner_lr,
            )
    return LandscapeGrid(amplitude_axis=a_axis, phase_axis=b_axis, mse=mse)


# --- cross-run comparison -----------------------------------------------------------


@dataclass(frozen=True)
class RunMetrics:
    principle: str
    seed: int
    report: MetricsReport


BASELINE_PRINCIPLE = "expected_risk"


def compare_runs(runs: Sequence[RunMetrics]) -> list[dict]:
    """One row per (principle, seed) with paired deltas against the
    expected-risk run of the same seed (empty when no baseline exists)."""
    if len(runs) < 2:
        raise ValueError("need at least two runs to compare")
    alphas = {r.report.alpha_eval for r in runs}
    if len(alphas) != 1:
        raise ValueError(f"runs evaluated at different alphas: {sorted(alphas)}")
    baseline = {
        r.seed: r.report for r in runs if r.principle == BASELINE_PRINCIPLE
    }
    rows = []
    for r in runs:
        base = baseline.get(r.seed)
        row = {
            "principle": r.principle,
            "seed": r.seed,
            "average": r.report.average,
            "worst": r.report.worst,
            "cvar": r.report.cvar,
            "alpha_eval": r.report.alpha_eval,
            "d_average": r.report.average - base.average if base else None,
            "d_worst": r.report.worst - base.worst if base else None,
            "d_cvar": r.report.cvar - base.cvar if base else None,
        }
        rows.append(row)
    return rows


# --- serialization -----------------------------------------------------------------


def write_metrics_json(path: str | Path, report: MetricsReport) -> Path:
    path = Path(path)
    payload = {
        "average": report.average,
        "worst": report.worst,
        "cvar": report.cvar,
        "alpha_eval": report.alpha_eval,
        "n_tasks": report.n_tasks,
        "per_task_losses": list(report.per_task_losses),
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_metrics_json(path: str | Path) -> MetricsReport:
    d = json.loads(Path(path).read_text())
    return MetricsReport(
        average=d["average"],
        worst=d["worst"],
        cvar=d["cvar"],
        alpha_eval=d["alpha_eval"],
        n_tasks=d["n_tasks"],
        per_task_losses=tuple(d["per_task_losses"]),
    )


def write_histogram_csv(path: str | Path, hist: Histogram) -> Path:
    """Columns: bin_lo, bin_hi, count."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist.bin_edges[:-1], hist.bin_edges[1:], hist.counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return path


def read_histogram_csv(path: str | Path) -> Histogram:
    lows, highs, counts = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            lows.append(float(row["bin_lo"]))
            highs.append(float(row["bin_hi"]))
            counts.append(int(row["count"]))
    edges = np.array(lows + [highs[-1]])
    return Histogram(bin_edges=edges, counts=np.array(counts), total=int(sum(counts)))


def write_landscape_csv(path: str | Path, grid: LandscapeGrid) -> Path:
    """Columns: a, b, mse (amplitude-major order)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["a", "b", "mse"])
        for i, a in enumerate(grid.amplitude_axis):
            for j, b in enumerate(grid.phase_axis):
                writer.writerow([repr(float(a)), repr(float(b)), repr(float(grid.mse[i, j]))])
    return path


def write_comparison_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    """Columns: principle, seed, average, worst, cvar, alpha_eval, and the
    paired deltas vs the expected-risk baseline."""
    path = Path(path)
    cols = ["principle", "seed", "average", "worst", "cvar", "alpha_eval",
            "d_average", "d_worst", "d_cvar"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow(
                ["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                 for c in cols]
            )
    return path
