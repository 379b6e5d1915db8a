"""Theory self-checks runnable from a fresh checkout (``drmeta selftest``).

Five suites, each its own oracle: the two-sided surrogate bound on random
discrete populations, surrogate-vs-quantile agreement, quantile-estimator
convergence, gradient checks against central finite differences, and the
bitwise principle equivalences. Failures carry reproduction seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import ParamVector, finite_difference_gradient, relative_error
from .models import ACT_CODES, ModelSpec, init_params, mlp_preactivations, mlp_task_loss
from .risk import (
    DiscretePopulation,
    PrincipleConfig,
    RiskBatch,
    UniformDistribution,
    cvar_estimate,
    estimate_var,
    quantile_error_trend,
    sandwich_check,
    surrogate_value,
    write_quantile_trend_csv,
    write_sandwich_csv,
)
from .tasks import SineDistConfig, SineTask, sample_task_data, task_rng
from .train import OptimizerConfig, TrainConfig, make_optimizer, maml_meta_step


@dataclass(frozen=True)
class SuiteResult:
    name: str
    passed: bool
    detail: str


def _random_population(rng: np.random.Generator) -> DiscretePopulation:
    n = int(rng.integers(2, 20))
    atoms = rng.uniform(0.0, 10.0, size=n)
    if rng.random() < 0.3:  # introduce ties now and then
        atoms[rng.integers(0, n)] = atoms[rng.integers(0, n)]
    probs = rng.random(n) + 0.05
    probs /= probs.sum()
    return DiscretePopulation(atoms=atoms, probs=probs)


def sandwich_suite(n_cases: int = 100, seed: int = 20260809, csv_path=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = []
    rows = []
    for case in range(n_cases):
        pop = _random_population(rng)
        alpha = float(rng.uniform(0.0, 0.95))
        xi_hat = pop.exact_var(alpha) + float(rng.uniform(-2.0, 2.0))
        rep = sandwich_check(pop, xi_hat, alpha)
        rows.append((case, alpha, xi_hat, rep))
        if not rep.holds:
            failures.append(f"case {case} (seed {seed})")
    if csv_path is not None:
        write_sandwich_csv(csv_path, rows)
    detail = f"{n_cases - len(failures)}/{n_cases} populations hold"
    if failures:
        detail += "; failed: " + ", ".join(failures[:5])
    return SuiteResult("sandwich_bound", not failures, detail)


def surrogate_quantile_suite(n_cases: int = 200, seed: int = 20260810) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = []
    for case in range(n_cases):
        b = int(rng.integers(1, 60))
        batch = RiskBatch.from_losses(rng.uniform(0.0, 10.0, size=b))
        alpha = float(rng.uniform(0.0, 0.95))
        xi = estimate_var(batch, alpha).xi_hat
        phi = surrogate_value(batch, xi, alpha)
        cv = cvar_estimate(batch, alpha)
        if phi < cv - 1e-12:
            failures.append(f"case {case}: phi below tail mean (seed {seed})")
        k_exact = (1.0 - alpha) * b
        if abs(k_exact - round(k_exact)) < 1e-9 and round(k_exact) >= 1:
            if abs(phi - cv) > 1e-9:
                failures.append(f"case {case}: phi != cvar at aligned quantile (seed {seed})")
    detail = f"{n_cases - len(failures)}/{n_cases} batches agree"
    if failures:
        detail += "; " + "; ".join(failures[:5])
    return SuiteResult("surrogate_vs_quantile", not failures, detail)


def quantile_trend_suite(seed: int = 20260811, csv_path=None) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rows = quantile_error_trend(
        UniformDistribution(), alphas=(0.5, 0.7, 0.9),
        batch_sizes=(100, 1000, 10000), trials=100, rng=rng,
    )
    if csv_path is not None:
        write_quantile_trend_csv(csv_path, rows)
    by_alpha = {}
    for r in rows:
        by_alpha.setdefault(r.alpha, {})[r.batch_size] = r
    failures = []
    for alpha, per_b in by_alpha.items():
        if not per_b[10000].mean_abs_error < per_b[100].mean_abs_error:
            failures.append(f"alpha={alpha}: no decrease from B=100 to B=10000 (seed {seed})")
    r = by_alpha[0.7][10000]
    if not r.mean_abs_error < 0.02:
        failures.append(f"alpha=0.7 B=10000 mean error {r.mean_abs_error:.4f} >= 0.02")
    detail = f"mean|err|(alpha=0.7, B=1e4) = {r.mean_abs_error:.5f}"
    if failures:
        detail += "; " + "; ".join(failures)
    return SuiteResult("quantile_convergence", not failures, detail)


def _smooth_loss_case(rng: np.random.Generator):
    dim = int(rng.integers(4, 12))
    x = rng.normal(size=dim)

    def loss(theta: ad.Tensor) -> ad.Tensor:
        s = ad.tmean(ad.softplus(theta))
        q = ad.log(ad.constant(1e-2) + ad.tmean(ad.square(theta)))
        t = ad.tanh(ad.tmean(ad.mul(theta, ad.constant(x))))
        return ad.add(s, ad.mul(q, ad.add(t, ad.exp(ad.constant(-1.0) * s))))

    return x, loss


def gradient_fd_suite(n_smooth: int = 100, n_meta: int = 3, seed: int = 20260812) -> SuiteResult:
    failures = []
    rng = np.random.default_rng(seed)
    flat_layout = lambda n: ad.ParamLayout((ad.LayoutField("theta", (n,), 0),))

    for case in range(n_smooth):
        x, loss = _smooth_loss_case(rng)
        theta0 = rng.normal(size=x.size)
        params = ParamVector(theta0, flat_layout(x.size))
        g = ad.gradient(loss, params).values
        fd = finite_difference_gradient(
            lambda v: loss(ad.Tensor(v)).item(), theta0, h=1e-5
        )
        err = relative_error(g, fd)
        if err >= 1e-5:
            failures.append(f"smooth case {case}: rel err {err:.2e} (seed {seed})")

    spec = ModelSpec((1, 40, 40, 1), "relu")
    widths, act = spec.layer_widths, ACT_CODES[spec.activation]
    for case in range(n_meta):
        g_meta, theta0, data, lr = _clean_meta_case(spec, rng)
        composite = lambda v: kernels.mlp_adapt_eval(
            v, widths, act, data.context_x, data.context_y,
            data.target_x, data.target_y, lr,
        )[1]
        fd = finite_difference_gradient(composite, theta0, h=1e-5)
        err = relative_error(g_meta, fd)
        if err >= 1e-4:
            failures.append(f"meta case {case}: rel err {err:.2e} (seed {seed})")

    detail = f"{n_smooth} smooth + {n_meta} meta-gradient checks"
    if failures:
        detail += "; " + "; ".join(failures[:5])
    return SuiteResult("gradient_finite_difference", not failures, detail)


def _clean_meta_case(spec: ModelSpec, rng: np.random.Generator, kink_margin: float = 1e-3):
    """Random task with parameters away from relu kinks (retry on detection)."""
    widths, act = spec.layer_widths, ACT_CODES[spec.activation]
    for _ in range(100):
        params = init_params(spec, rng)
        task = SineTask(float(rng.uniform(0.5, 5.0)), float(rng.uniform(0.0, np.pi)))
        data = sample_task_data(task, 5, 5, rng)
        adapted, _ = kernels.mlp_adapt_eval(
            params.values, widths, act, data.context_x, data.context_y,
            data.target_x, data.target_y, 0.01,
        )
        margins = [
            np.abs(pre).min()
            for pre in mlp_preactivations(spec, params, data.context_x)
        ] + [
            np.abs(pre).min()
            for pre in mlp_preactivations(
                spec, ParamVector(adapted, params.layout), data.target_x
            )
        ]
        if min(margins) > kink_margin:
            g, _, _ = kernels.mlp_meta_grad(
                params.values, widths, act, data.context_x, data.context_y,
                data.target_x, data.target_y, 0.01, True,
            )
            return g, params.values, data, 0.01
    raise RuntimeError("could not find a kink-free meta-gradient case")


def principle_equivalence_suite(seed: int = 20260813) -> SuiteResult:
    spec = ModelSpec((1, 8, 1), "relu")
    sine = SineDistConfig()
    failures = []

    def run_once(principle: PrincipleConfig):
        cfg = TrainConfig(
            model=spec, principle=principle, iterations=1, seed=seed,
            batch_size=4, k_shots=3, outer=OptimizerConfig(kind="sgd", lr=0.1),
            sine=sine,
        )
        params = init_params(spec, task_rng(seed, 0))
        tasks = [
            sample_task_data(
                SineTask(a, b), 3, 3, task_rng(seed, 1, i)
            )
            for i, (a, b) in enumerate([(0.5, 0.1), (4.99, 1.0), (1.0, 2.0), (3.0, 0.4)])
        ]
        opt = make_optimizer(cfg.outer, len(params))
        new_params, _, _ = maml_meta_step(params, tasks, cfg, opt)
        return new_params.values

    erm = run_once(PrincipleConfig(kind="expected_risk"))
    cvar0 = run_once(PrincipleConfig(kind="cvar_two_stage", alpha=0.0))
    if not np.array_equal(erm, cvar0):
        failures.append(f"cvar(alpha=0) differs from expected_risk (seed {seed})")

    worst = run_once(PrincipleConfig(kind="worst_in_batch"))
    cvar_k1 = run_once(PrincipleConfig(kind="cvar_two_stage", alpha=0.97))  # k=1 at B=4
    if not np.array_equal(worst, cvar_k1):
        failures.append(f"forced-k=1 cvar differs from worst_in_batch (seed {seed})")

    detail = "cvar(0)==expected_risk and k=1 cvar==worst_in_batch (bitwise)"
    if failures:
        detail = "; ".join(failures)
    return SuiteResult("principle_equivalence", not failures, detail)


def run_selftest(report_dir: str | Path | None = None) -> list[SuiteResult]:
    report_dir = Path(report_dir) if report_dir is not None else None
    if report_dir is not None:
        report_dir.mkdir(parents=True, exist_ok=True)
    sandwich_csv = report_dir / "sandwich_report.csv" if report_dir else None
    trend_csv = report_dir / "quantile_trend.csv" if report_dir else None
    return [
        sandwich_suite(csv_path=sandwich_csv),
        surrogate_quantile_suite(),
        quantile_trend_suite(csv_path=trend_csv),
        gradient_fd_suite(),
        principle_equivalence_suite(),
    ]
