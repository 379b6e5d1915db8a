"""Task distributions: sinusoid regression with an easy/hard training
split, the 490-task evaluation grid, and GP curves for the CNP benchmark.

All sampling is keyed by explicit integer tuples through ``task_rng`` so
any task draw is reproducible independently of iteration order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

Array = np.ndarray

# rng stream domains: keep init / training tasks / evaluation disjoint
INIT_STREAM = 0
TRAIN_STREAM = 1
EVAL_STREAM = 2


def task_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class SineTask:
    amplitude: float
    phase: float

    def __post_init__(self):
        if not 0.1 <= self.amplitude <= 5.0:
            raise ValueError(f"amplitude {self.amplitude} outside [0.1, 5.0]")
        if not 0.0 <= self.phase <= 2.0 * math.pi:
            raise ValueError(f"phase {self.phase} outside [0, 2*pi]")


@dataclass(frozen=True)
class TaskData:
    """Context and target point sets for one task."""

    context_x: Array
    context_y: Array
    target_x: Array
    target_y: Array

    def __post_init__(self):
        for name in ("context_x", "context_y", "target_x", "target_y"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-d (points, dim)")
            object.__setattr__(self, name, arr)
        if self.context_x.shape[0] != self.context_y.shape[0]:
            raise ValueError("context x/y row counts differ")
        if self.target_x.shape[0] != self.target_y.shape[0]:
            raise ValueError("target x/y row counts differ")


@dataclass(frozen=True)
class SineDistConfig:
    """Training draws mix easy and hard amplitudes; tests cover the full
    ranges. Defaults follow the standard benchmark conventions."""

    p_hard: float = 0.1
    easy_amplitude: tuple[float, float] = (0.1, 1.05)
    hard_amplitude: tuple[float, float] = (4.95, 5.0)
    train_phase: tuple[float, float] = (0.0, math.pi)
    x_range: tuple[float, float] = (-5.0, 5.0)
    amplitude_range: tuple[float, float] = (0.1, 5.0)
    phase_range: tuple[float, float] = (0.0, 2.0 * math.pi)

    def __post_init__(self):
        if not 0.0 <= self.p_hard <= 1.0:
            raise ValueError("p_hard must lie in [0, 1]")
        for lo, hi in (self.easy_amplitude, self.hard_amplitude, self.train_phase,
                       self.x_range, self.amplitude_range, self.phase_range):
            if hi < lo:
                raise ValueError("range bounds out of order")


def sample_train_task(rng: np.random.Generator, cfg: SineDistConfig) -> SineTask:
    hard = rng.random() < cfg.p_hard
    lo, hi = cfg.hard_amplitude if hard else cfg.easy_amplitude
    amplitude = rng.uniform(lo, hi)
    phase = rng.uniform(*cfg.train_phase)
    return SineTask(amplitude=amplitude, phase=phase)


def build_test_grid(
    cfg: SineDistConfig, n_amplitude: int = 49, n_phase: int = 10
) -> list[SineTask]:
    """Deterministic amplitude-major grid of 490 evaluation tasks."""
    if n_amplitude * n_phase != 490:
        raise ValueError(
            f"test grid must contain 490 tasks, got {n_amplitude} x {n_phase}"
        )
    amps = np.linspace(*cfg.amplitude_range, n_amplitude)
    phases = np.linspace(*cfg.phase_range, n_phase)
    return [SineTask(float(a), float(b)) for a in amps for b in phases]


def sine_values(task: SineTask, x: Array) -> Array:
    return task.amplitude * np.sin(x - task.phase)


def sample_task_data(
    task: SineTask, k: int, m: int, rng: np.random.Generator,
    x_range: tuple[float, float] = (-5.0, 5.0),
) -> TaskData:
    """K context and M target points, x i.i.d. uniform, exact sine values."""
    if k < 1 or m < 1:
        raise ValueError("K and M must be at least 1")
    cx = rng.uniform(*x_range, size=(k, 1))
    tx = rng.uniform(*x_range, size=(m, 1))
    return TaskData(
        context_x=cx,
        context_y=sine_values(task, cx),
        target_x=tx,
        target_y=sine_values(task, tx),
    )


# --- GP curves ------------------------------------------------------------------


class GPSamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class GPConfig:
    grid_size: int = 400
    x_range: tuple[float, float] = (-2.0, 2.0)
    length_scale: float = 0.4
    signal_variance: float = 1.0
    context_range: tuple[int, int] = (3, 50)
    jitter: float = 1e-6

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValueError("grid_size must be at least 2")
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if self.signal_variance < 0:
            raise ValueError("signal_variance must be non-negative")
        lo, hi = self.context_range
        if not 1 <= lo <= hi <= self.grid_size:
            raise ValueError("context_range must satisfy 1 <= lo <= hi <= grid_size")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")


@dataclass(frozen=True)
class GPCurveTask:
    x_grid: Array
    y_grid: Array
    length_scale: float
    signal_variance: float


def _rbf_covariance(x: Array, length_scale: float, signal_variance: float) -> Array:
    d = x - x.T
    return signal_variance * np.exp(-0.5 * (d / length_scale) ** 2)


def sample_gp_task(rng: np.random.Generator, cfg: GPConfig) -> tuple[GPCurveTask, TaskData]:
    """Draw one curve from the RBF prior over the grid; context points are a
    uniform subset of the grid, targets the full grid."""
    x = np.linspace(*cfg.x_range, cfg.grid_size).reshape(-1, 1)
    cov = _rbf_covariance(x, cfg.length_scale, cfg.signal_variance)
    jitter = cfg.jitter
    chol = None
    for _ in range(4):  # initial try + 3 escalations (x10 each)
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(cfg.grid_size))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
    if chol is None:
        raise GPSamplingError(
            f"covariance factorization failed up to jitter {jitter / 10.0:g}"
        )
    y = (chol @ rng.standard_normal((cfg.grid_size, 1))).reshape(-1, 1)

    lo, hi = cfg.context_range
    n_ctx = int(rng.integers(lo, hi, endpoint=True))
    ctx_idx = np.sort(rng.choice(cfg.grid_size, size=n_ctx, replace=False))
    task = GPCurveTask(
        x_grid=x, y_grid=y,
        length_scale=cfg.length_scale, signal_variance=cfg.signal_variance,
    )
    data = TaskData(
        context_x=x[ctx_idx], context_y=y[ctx_idx], target_x=x, target_y=y
    )
    return task, data


def sample_gp_eval_set(cfg: GPConfig, n_tasks: int, seed: int) -> list[TaskData]:
    """Evaluation curves seeded per (seed, task index): identical across the
    methods being compared."""
    return [
        sample_gp_task(task_rng(seed, EVAL_STREAM, i), cfg)[1] for i in range(n_tasks)
    ]


def export_tasks_csv(path: str | Path, tasks: Sequence[SineTask]) -> Path:
    """Columns: task_index, a, b."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_index", "a", "b"])
        for i, t in enumerate(tasks):
            writer.writerow([i, repr(t.amplitude), repr(t.phase)])
    return path
