"""Risk measures over a batch of per-task losses.

Everything here is order-statistic based: the value-at-risk estimate is the
ceil(alpha*B)-th smallest loss of the batch, tail screening keeps the
k = max(1, floor((1-alpha)*B)) largest losses, and the hinge surrogate

    phi_alpha(xi) = xi + mean(max(loss - xi, 0)) / (1 - alpha)

ties the two together: its minimum over xi equals the tail mean and is
attained at the quantile. ``sandwich_check`` verifies the two-sided bound
linking phi at an approximate quantile to the exact tail expectation of a
discrete population, with constant kappa_alpha.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray

PRINCIPLES = ("expected_risk", "worst_in_batch", "cvar_two_stage", "group_dro")


@dataclass(frozen=True)
class RiskBatch:
    """Per-task scalar losses for one meta-batch.

    Losses must be finite; NLL-style objectives may legitimately go
    negative, so no sign constraint is imposed. Task indices are unique.
    """

    task_indices: Array
    losses: Array

    def __post_init__(self):
        idx = np.ascontiguousarray(self.task_indices, dtype=np.int64)
        losses = np.ascontiguousarray(self.losses, dtype=np.float64)
        if idx.ndim != 1 or losses.ndim != 1 or idx.size != losses.size:
            raise ValueError("task_indices and losses must be 1-d and aligned")
        if idx.size == 0:
            raise ValueError("risk batch must be non-empty")
        if np.unique(idx).size != idx.size:
            raise ValueError("task indices must be unique")
        if not np.all(np.isfinite(losses)):
            raise ValueError("losses must be finite")
        object.__setattr__(self, "task_indices", idx)
        object.__setattr__(self, "losses", losses)

    @classmethod
    def from_losses(cls, losses: Sequence[float]) -> "RiskBatch":
        losses = np.asarray(losses, dtype=np.float64)
        return cls(np.arange(losses.size), losses)

    @property
    def size(self) -> int:
        return int(self.losses.size)


def _check_alpha(alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return float(alpha)


@dataclass(frozen=True)
class VarEstimate:
    """Crude Monte Carlo quantile: an order statistic of the batch."""

    xi_hat: float
    alpha: float
    batch_size: int


@dataclass(frozen=True)
class TailSelection:
    """The k tasks with the largest losses (ties: smaller task index wins)."""

    selected: Array  # task indices, ascending
    k: int
    var_estimate: VarEstimate


def estimate_var(batch: RiskBatch, alpha: float) -> VarEstimate:
    """ceil(alpha * B)-th smallest loss (index floor 1): the smallest loss
    whose empirical CDF reaches alpha."""
    alpha = _check_alpha(alpha)
    b = batch.size
    rank = max(1, math.ceil(alpha * b))
    xi = float(np.partition(batch.losses, rank - 1)[rank - 1])
    return VarEstimate(xi_hat=xi, alpha=alpha, batch_size=b)


def _screen_top_k(batch: RiskBatch, k: int, var: VarEstimate) -> TailSelection:
    order = np.lexsort((batch.task_indices, -batch.losses))
    chosen = batch.task_indices[order[:k]]
    return TailSelection(selected=np.sort(chosen), k=k, var_estimate=var)


def tail_count(batch_size: int, alpha: float) -> int:
    return max(1, math.floor((1.0 - alpha) * batch_size))


def screen_tail(batch: RiskBatch, alpha: float) -> TailSelection:
    """Keep the k = max(1, floor((1-alpha)*B)) worst tasks."""
    alpha = _check_alpha(alpha)
    return _screen_top_k(batch, tail_count(batch.size, alpha), estimate_var(batch, alpha))


def cvar_estimate(batch: RiskBatch, alpha: float) -> float:
    """Mean loss over the screened tail."""
    sel = screen_tail(batch, alpha)
    mask = np.isin(batch.task_indices, sel.selected)
    order = np.argsort(batch.task_indices[mask])
    return float(np.mean(batch.losses[mask][order]))


def surrogate_value(batch: RiskBatch, xi: float, alpha: float) -> float:
    """xi + (1/((1-alpha)*B)) * sum(max(loss_i - xi, 0))."""
    alpha = _check_alpha(alpha)
    hinge = np.maximum(batch.losses - xi, 0.0).sum()
    return float(xi + hinge / ((1.0 - alpha) * batch.size))


def kappa(alpha: float) -> float:
    """max{(2-alpha)/(1-alpha), alpha/(1-alpha)}."""
    alpha = _check_alpha(alpha)
    return max((2.0 - alpha) / (1.0 - alpha), alpha / (1.0 - alpha))


# --- exact checks on discrete populations ------------------------------------


@dataclass(frozen=True)
class DiscretePopulation:
    """Explicit atoms with probabilities; exact VaR/CVaR by enumeration."""

    atoms: Array
    probs: Array

    def __post_init__(self):
        atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        if atoms.size == 0 or atoms.size != probs.size:
            raise ValueError("atoms and probs must be non-empty and aligned")
        if np.any(probs < 0):
            raise ValueError("probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1 within 1e-12")
        order = np.argsort(atoms, kind="stable")
        object.__setattr__(self, "atoms", atoms[order])
        object.__setattr__(self, "probs", probs[order])

    def exact_var(self, alpha: float) -> float:
        alpha = _check_alpha(alpha)
        cdf = np.cumsum(self.probs)
        idx = int(np.searchsorted(cdf, alpha, side="left"))
        # guard against cdf rounding just below alpha at the top atom
        idx = min(idx, self.atoms.size - 1)
        while idx < self.atoms.size - 1 and cdf[idx] < alpha:
            idx += 1
        return float(self.atoms[idx])

    def surrogate(self, xi: float, alpha: float) -> float:
        alpha = _check_alpha(alpha)
        hinge = float(np.sum(self.probs * np.maximum(self.atoms - xi, 0.0)))
        return float(xi + hinge / (1.0 - alpha))

    def exact_cvar(self, alpha: float) -> float:
        # phi at the exact quantile equals the normalized-tail expectation
        return self.surrogate(self.exact_var(alpha), alpha)


@dataclass(frozen=True)
class SandwichReport:
    phi: float
    exact_var: float
    exact_cvar: float
    delta: float
    kappa: float
    holds: bool


def sandwich_check(
    population: DiscretePopulation, xi_hat: float, alpha: float
) -> SandwichReport:
    """Evaluate phi at xi_hat and test
    phi - kappa*delta <= exact CVaR <= phi (1e-12 slack; equality is the
    delta = 0 boundary case)."""
    alpha = _check_alpha(alpha)
    phi = population.surrogate(xi_hat, alpha)
    exact_var = population.exact_var(alpha)
    exact_cvar = population.exact_cvar(alpha)
    delta = abs(xi_hat - exact_var)
    kap = kappa(alpha)
    holds = (phi - kap * delta <= exact_cvar + 1e-12) and (exact_cvar <= phi + 1e-12)
    return SandwichReport(
        phi=phi,
        exact_var=exact_var,
        exact_cvar=exact_cvar,
        delta=delta,
        kappa=kap,
        holds=holds,
    )


# --- reweighting & empirical CDF ---------------------------------------------


def group_dro_weights(batch: RiskBatch, temperature: float) -> Array:
    """softmax(losses / temperature), computed with max subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = batch.losses / temperature
    w = np.exp(z - z.max())
    return w / w.sum()


class EmpiricalCdf:
    """Right-continuous step function F(x) = #{losses <= x} / B."""

    def __init__(self, batch: RiskBatch):
        self._sorted = np.sort(batch.losses)
        self._n = batch.size

    def __call__(self, x):
        ranks = np.searchsorted(self._sorted, np.asarray(x, dtype=np.float64), side="right")
        out = ranks / self._n
        return float(out) if np.isscalar(x) or np.asarray(x).ndim == 0 else out


def empirical_cdf(batch: RiskBatch) -> EmpiricalCdf:
    return EmpiricalCdf(batch)


# --- quantile-estimator convergence -------------------------------------------


@dataclass(frozen=True)
class UniformDistribution:
    low: float = 0.0
    high: float = 1.0

    def ppf(self, q: float) -> float:
        return self.low + q * (self.high - self.low)

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return rng.uniform(self.low, self.high, size=n)


@dataclass(frozen=True)
class ExponentialDistribution:
    rate: float = 1.0

    def ppf(self, q: float) -> float:
        return -math.log1p(-q) / self.rate

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        return rng.exponential(1.0 / self.rate, size=n)


@dataclass(frozen=True)
class TrendRow:
    alpha: float
    batch_size: int
    mean_abs_error: float
    sem: float


def quantile_error_trend(
    distribution,
    alphas: Sequence[float],
    batch_sizes: Sequence[int],
    trials: int,
    rng: np.random.Generator,
) -> list[TrendRow]:
    """Mean |xi_hat - true quantile| of the order-statistic estimator, per
    (alpha, batch size); errors shrink as the batch grows."""
    rows = []
    for alpha in alphas:
        alpha = _check_alpha(alpha)
        for b in batch_sizes:
            target = distribution.ppf(alpha)
            errs = np.empty(trials)
            for t in range(trials):
                sample = distribution.sample(rng, b)
                est = estimate_var(RiskBatch.from_losses(sample), alpha)
                errs[t] = abs(est.xi_hat - target)
            rows.append(
                TrendRow(
                    alpha=alpha,
                    batch_size=int(b),
                    mean_abs_error=float(errs.mean()),
                    sem=float(errs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0,
                )
            )
    return rows


# --- per-principle task weights ----------------------------------------------


@dataclass(frozen=True)
class PrincipleConfig:
    """Which risk-minimization principle drives the outer update."""

    kind: str
    alpha: float = 0.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in PRINCIPLES:
            raise ValueError(f"kind must be one of {PRINCIPLES}, got {self.kind!r}")
        _check_alpha(self.alpha)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class PrincipleWeights:
    """Constant per-task weights for the outer gradient, aligned with the
    batch order; ``selected`` is the screened index set where applicable."""

    weights: Array
    selection: TailSelection | None


def principle_weights(principle: PrincipleConfig, batch: RiskBatch) -> PrincipleWeights:
    b = batch.size
    if principle.kind == "expected_risk":
        return PrincipleWeights(np.full(b, 1.0 / b), None)
    if principle.kind == "worst_in_batch":
        sel = _screen_top_k(batch, 1, estimate_var(batch, principle.alpha))
        weights = np.where(np.isin(batch.task_indices, sel.selected), 1.0, 0.0)
        return PrincipleWeights(weights, sel)
    if principle.kind == "cvar_two_stage":
        sel = screen_tail(batch, principle.alpha)
        weights = np.where(np.isin(batch.task_indices, sel.selected), 1.0 / sel.k, 0.0)
        return PrincipleWeights(weights, sel)
    return PrincipleWeights(group_dro_weights(batch, principle.temperature), None)


# --- CSV reports ---------------------------------------------------------------


def write_sandwich_csv(path: str | Path, reports: Iterable[tuple[int, float, float, SandwichReport]]) -> Path:
    """Columns: case, alpha, xi_hat, phi, exact_var, exact_cvar, delta, kappa, holds."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["case", "alpha", "xi_hat", "phi", "exact_var", "exact_cvar", "delta", "kappa", "holds"]
        )
        for case, alpha, xi_hat, rep in reports:
            writer.writerow(
                [case, repr(alpha), repr(xi_hat), repr(rep.phi), repr(rep.exact_var),
                 repr(rep.exact_cvar), repr(rep.delta), repr(rep.kappa), int(rep.holds)]
            )
    return path


def write_quantile_trend_csv(path: str | Path, rows: Sequence[TrendRow]) -> Path:
    """Columns: alpha, batch_size, mean_abs_error, sem."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "batch_size", "mean_abs_error", "sem"])
        for row in rows:
            writer.writerow(
                [repr(row.alpha), row.batch_size, repr(row.mean_abs_error), repr(row.sem)]
            )
    return path
