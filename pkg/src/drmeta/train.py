"""Training loops for the one-step-adaptation MLP and the CNP.

Each iteration samples a fresh task batch, evaluates per-task
post-adaptation losses, maps them to constant task weights under the
configured risk principle (the screening decision is not differentiated
through), and applies the weighted outer gradient. Per-iteration surrogate
diagnostics (xi_hat, phi) are logged to trace.csv.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import __version__
from . import autodiff as ad
from . import kernels
from .autodiff import ParamVector, Tensor
from .evalreport import MetricsReport, evaluate_metrics, write_metrics_json
from .models import (
    ACT_CODES,
    AnySpec,
    CNPSpec,
    ModelSpec,
    canonical_context_order,
    init_params,
    save_checkpoint,
    spec_to_dict,
)
from .risk import (
    PrincipleConfig,
    PrincipleWeights,
    RiskBatch,
    estimate_var,
    principle_weights,
    surrogate_value,
)
from .tasks import (
    EVAL_STREAM,
    INIT_STREAM,
    TRAIN_STREAM,
    GPConfig,
    SineDistConfig,
    TaskData,
    build_test_grid,
    sample_gp_eval_set,
    sample_gp_task,
    sample_task_data,
    sample_train_task,
    task_rng,
)

Array = np.ndarray


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError("optimizer kind must be 'adam' or 'sgd'")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class SgdOptimizer:
    def __init__(self, cfg: OptimizerConfig, dim: int):
        self.lr = cfg.lr

    def step(self, values: Array, grad: Array) -> Array:
        return values - self.lr * grad


class AdamOptimizer:
    def __init__(self, cfg: OptimizerConfig, dim: int):
        self.cfg = cfg
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, values: Array, grad: Array) -> Array:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1.0 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1.0 - c.beta2) * grad * grad
        m_hat = self.m / (1.0 - c.beta1**self.t)
        v_hat = self.v / (1.0 - c.beta2**self.t)
        return values - c.lr * m_hat / (np.sqrt(v_hat) + c.eps)


def make_optimizer(cfg: OptimizerConfig, dim: int):
    return AdamOptimizer(cfg, dim) if cfg.kind == "adam" else SgdOptimizer(cfg, dim)


@dataclass(frozen=True)
class TrainConfig:
    model: AnySpec
    principle: PrincipleConfig
    iterations: int
    seed: int
    batch_size: int = 25
    k_shots: int = 5
    m_targets: int | None = None
    inner_lr: float = 0.01
    inner_steps: int = 1
    outer: OptimizerConfig = field(default_factory=OptimizerConfig)
    gradient_mode: str = "exact"
    eval_every: int = 0
    eval_alpha: float = 0.7
    eval_tasks: int = 64
    sine: SineDistConfig | None = None
    gp: GPConfig | None = None
    grid_amplitudes: int = 49
    grid_phases: int = 10

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.k_shots < 1:
            raise ValueError("k_shots must be at least 1")
        if self.inner_steps != 1:
            raise ValueError("only one inner adaptation step is supported")
        if self.gradient_mode not in ("exact", "first_order"):
            raise ValueError("gradient_mode must be 'exact' or 'first_order'")
        if not 0.0 <= self.eval_alpha < 1.0:
            raise ValueError("eval_alpha must lie in [0, 1)")
        if isinstance(self.model, ModelSpec):
            if self.inner_lr <= 0:
                raise ValueError("inner_lr must be positive")
            if self.sine is None:
                object.__setattr__(self, "sine", SineDistConfig())
        elif isinstance(self.model, CNPSpec):
            if self.gp is None:
                object.__setattr__(self, "gp", GPConfig())
        else:
            raise TypeError(f"unsupported model spec {type(self.model)!r}")

    @property
    def m_resolved(self) -> int:
        return self.m_targets if self.m_targets is not None else self.k_shots

    @property
    def trace_alpha(self) -> float:
        return self.principle.alpha


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    xi_hat: float
    phi: float
    mean_loss: float
    max_loss: float
    k: int


def _trace_record(
    iteration: int, batch: RiskBatch, weights: PrincipleWeights, alpha: float
) -> TraceRecord:
    xi = estimate_var(batch, alpha).xi_hat
    return TraceRecord(
        iteration=iteration,
        xi_hat=xi,
        phi=surrogate_value(batch, xi, alpha),
        mean_loss=float(batch.losses.mean()),
        max_loss=float(batch.losses.max()),
        k=int(np.count_nonzero(weights.weights)),
    )


def inner_adapt(params: ParamVector, context_loss: ad.LossFn, inner_lr: float) -> ParamVector:
    """One gradient step on the context loss (engine path; the training loop
    uses the equivalent compiled kernel)."""
    if inner_lr < 0:
        raise ValueError("inner_lr must be non-negative")
    g = ad.gradient(context_loss, params)
    return params.with_values(params.values - inner_lr * g.values)


def maml_meta_step(
    params: ParamVector,
    tasks: Sequence[TaskData],
    cfg: TrainConfig,
    optimizer,
    iteration: int = 0,
) -> tuple[ParamVector, RiskBatch, TraceRecord]:
    """Inner-adapt every task, screen/weight the post-adaptation target
    losses per the principle, then apply the weighted meta-gradient."""
    if len(tasks) != cfg.batch_size:
        raise ValueError(f"expected {cfg.batch_size} tasks, got {len(tasks)}")
    spec: ModelSpec = cfg.model
    widths = spec.layer_widths
    act = ACT_CODES[spec.activation]
    theta = params.values

    losses = np.empty(len(tasks))
    for i, td in enumerate(tasks):
        _, losses[i] = kernels.mlp_adapt_eval(
            theta, widths, act, td.context_x, td.context_y,
            td.target_x, td.target_y, cfg.inner_lr,
        )
    batch = RiskBatch(np.arange(len(tasks)), losses)
    pw = principle_weights(cfg.principle, batch)

    second_order = cfg.gradient_mode == "exact"
    outer_grad = np.zeros_like(theta)
    for i in np.flatnonzero(pw.weights != 0.0):
        td = tasks[i]
        g, _, _ = kernels.mlp_meta_grad(
            theta, widths, act, td.context_x, td.context_y,
            td.target_x, td.target_y, cfg.inner_lr, second_order,
        )
        if not np.all(np.isfinite(g)):
            raise TrainingError(
                f"non-finite meta-gradient for task {i} at iteration {iteration}"
            )
        outer_grad += pw.weights[i] * g

    try:
        new_params = params.with_values(optimizer.step(theta, outer_grad))
    except ValueError as exc:
        raise TrainingError(f"update rejected at iteration {iteration}: {exc}") from exc
    return new_params, batch, _trace_record(iteration, batch, pw, cfg.trace_alpha)


def _cnp_batch_losses(spec: CNPSpec, theta: Tensor, tasks: Sequence[TaskData]) -> Tensor:
    """Per-task mean NLL as one batched graph node of shape (B,). Contexts
    are canonically sorted, zero-padded, and masked out of the mean. The
    encoder/decoder run on flattened (B*points, features) matrices so each
    layer is a single GEMM."""
    b = len(tasks)
    m = tasks[0].target_x.shape[0]
    kmax = max(t.context_x.shape[0] for t in tasks)
    pairs = np.zeros((b, kmax, spec.x_dim + spec.y_dim))
    mask = np.zeros((b, kmax, 1))
    counts = np.empty((b, 1))
    tx = np.stack([t.target_x for t in tasks])
    ty = np.stack([t.target_y for t in tasks])
    for i, t in enumerate(tasks):
        k = t.context_x.shape[0]
        order = canonical_context_order(t.context_x, t.context_y)
        pairs[i, :k, : spec.x_dim] = t.context_x[order]
        pairs[i, :k, spec.x_dim :] = t.context_y[order]
        mask[i, :k] = 1.0
        counts[i] = k

    layout = spec.layout()

    def chain(prefix: str, n_layers: int, h: Tensor) -> Tensor:
        activation = ad.tanh if spec.activation == "tanh" else ad.relu
        for li in range(n_layers):
            fw = layout.field(f"{prefix}W{li}")
            fb = layout.field(f"{prefix}b{li}")
            w = ad.reshape(theta[fw.offset : fw.offset + fw.size], fw.shape)
            bias = theta[fb.offset : fb.offset + fb.size]
            a = ad.add(ad.matmul(h, w), bias)
            h = activation(a) if li < n_layers - 1 else a
        return h

    enc = chain(
        "enc_", len(spec.encoder_chain) - 1,
        ad.constant(pairs.reshape(b * kmax, spec.x_dim + spec.y_dim)),
    )
    masked = ad.mul(ad.reshape(enc, (b, kmax, spec.repr_dim)), ad.constant(mask))
    z = ad.div(ad.tsum(masked, axis=1), ad.constant(counts))  # (B, repr)
    zt = ad.reshape(
        ad.broadcast_to(ad.reshape(z, (b, 1, spec.repr_dim)), (b, m, spec.repr_dim)),
        (b * m, spec.repr_dim),
    )
    dec_in = ad.concat([zt, ad.constant(tx.reshape(b * m, spec.x_dim))], axis=1)
    out = chain("dec_", len(spec.decoder_chain) - 1, dec_in)
    mean = out[:, : spec.y_dim]
    var = ad.add(ad.softplus(out[:, spec.y_dim :]), ad.constant(spec.var_floor))
    resid = ad.sub(ad.constant(ty.reshape(b * m, spec.y_dim)), mean)
    nll = ad.add(
        ad.mul(ad.constant(0.5), ad.log(ad.mul(ad.constant(2.0 * np.pi), var))),
        ad.div(ad.square(resid), ad.mul(ad.constant(2.0), var)),
    )
    return ad.tmean(ad.reshape(nll, (b, m * spec.y_dim)), axis=1)


def cnp_meta_step(
    params: ParamVector,
    tasks: Sequence[TaskData],
    cfg: TrainConfig,
    optimizer,
    iteration: int = 0,
) -> tuple[ParamVector, RiskBatch, TraceRecord]:
    """No inner loop: conditioning on the context is the adaptation. One
    first-order step on the principle-weighted per-task NLLs."""
    if len(tasks) != cfg.batch_size:
        raise ValueError(f"expected {cfg.batch_size} tasks, got {len(tasks)}")
    spec: CNPSpec = cfg.model
    theta_t = Tensor(np.array(params.values))
    loss_vec = _cnp_batch_losses(spec, theta_t, tasks)
    losses = np.array(loss_vec.data)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise TrainingError(
            f"non-finite loss for task {bad[0]} at iteration {iteration}"
        )
    batch = RiskBatch(np.arange(len(tasks)), losses)
    pw = principle_weights(cfg.principle, batch)

    total = ad.tsum(ad.mul(loss_vec, ad.constant(pw.weights)))
    (g,) = ad.grad(total, [theta_t])
    if not np.all(np.isfinite(g.data)):
        raise TrainingError(f"non-finite meta-gradient at iteration {iteration}")
    try:
        new_params = params.with_values(optimizer.step(params.values, g.data))
    except ValueError as exc:
        raise TrainingError(f"update rejected at iteration {iteration}: {exc}") from exc
    return new_params, batch, _trace_record(iteration, batch, pw, cfg.trace_alpha)


# --- batch sampling -------------------------------------------------------------


def sample_train_batch(cfg: TrainConfig, iteration: int) -> list[TaskData]:
    """Fresh task batch; each task draw owns an rng stream keyed by
    (seed, domain, iteration, task index), so batches are reproducible and
    order-independent."""
    out = []
    if isinstance(cfg.model, ModelSpec):
        for i in range(cfg.batch_size):
            rng = task_rng(cfg.seed, TRAIN_STREAM, iteration, i)
            task = sample_train_task(rng, cfg.sine)
            out.append(
                sample_task_data(task, cfg.k_shots, cfg.m_resolved, rng, cfg.sine.x_range)
            )
    else:
        for i in range(cfg.batch_size):
            rng = task_rng(cfg.seed, TRAIN_STREAM, iteration, i)
            out.append(sample_gp_task(rng, cfg.gp)[1])
    return out


# --- run directory outputs --------------------------------------------------------


def train_config_to_dict(cfg: TrainConfig) -> dict:
    d = {
        "model": spec_to_dict(cfg.model),
        "principle": {
            "kind": cfg.principle.kind,
            "alpha": cfg.principle.alpha,
            "temperature": cfg.principle.temperature,
        },
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "k_shots": cfg.k_shots,
        "m_targets": cfg.m_resolved,
        "inner_lr": cfg.inner_lr,
        "inner_steps": cfg.inner_steps,
        "outer": {
            "kind": cfg.outer.kind,
            "lr": cfg.outer.lr,
            "beta1": cfg.outer.beta1,
            "beta2": cfg.outer.beta2,
            "eps": cfg.outer.eps,
        },
        "gradient_mode": cfg.gradient_mode,
        "eval_every": cfg.eval_every,
        "eval_alpha": cfg.eval_alpha,
        "eval_tasks": cfg.eval_tasks,
        "grid_amplitudes": cfg.grid_amplitudes,
        "grid_phases": cfg.grid_phases,
    }
    if cfg.sine is not None:
        d["sine"] = {
            "p_hard": cfg.sine.p_hard,
            "easy_amplitude": list(cfg.sine.easy_amplitude),
            "hard_amplitude": list(cfg.sine.hard_amplitude),
            "train_phase": list(cfg.sine.train_phase),
            "x_range": list(cfg.sine.x_range),
            "amplitude_range": list(cfg.sine.amplitude_range),
            "phase_range": list(cfg.sine.phase_range),
        }
    if cfg.gp is not None:
        d["gp"] = {
            "grid_size": cfg.gp.grid_size,
            "x_range": list(cfg.gp.x_range),
            "length_scale": cfg.gp.length_scale,
            "signal_variance": cfg.gp.signal_variance,
            "context_range": list(cfg.gp.context_range),
            "jitter": cfg.gp.jitter,
        }
    return d


TRACE_HEADER = ["iter", "xi_hat", "phi", "mean_loss", "max_loss", "k"]


def write_trace_csv(path: str | Path, trace: Sequence[TraceRecord]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for r in trace:
            writer.writerow(
                [r.iteration, repr(r.xi_hat), repr(r.phi),
                 repr(r.mean_loss), repr(r.max_loss), r.k]
            )
    return path


def read_trace_csv(path: str | Path) -> list[TraceRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                TraceRecord(
                    iteration=int(row["iter"]),
                    xi_hat=float(row["xi_hat"]),
                    phi=float(row["phi"]),
                    mean_loss=float(row["mean_loss"]),
                    max_loss=float(row["max_loss"]),
                    k=int(row["k"]),
                )
            )
    return out


@dataclass(frozen=True)
class TrainResult:
    params: ParamVector
    trace: tuple[TraceRecord, ...]
    run_dir: Path
    final_metrics: MetricsReport


def _evaluate(cfg: TrainConfig, params: ParamVector) -> MetricsReport:
    if isinstance(cfg.model, ModelSpec):
        grid = build_test_grid(cfg.sine, cfg.grid_amplitudes, cfg.grid_phases)
        return evaluate_metrics(
            cfg.model, params, grid,
            k_shots=cfg.k_shots, m_targets=cfg.m_resolved,
            alpha_eval=cfg.eval_alpha, seed=cfg.seed, inner_lr=cfg.inner_lr,
        )
    eval_set = sample_gp_eval_set(cfg.gp, cfg.eval_tasks, cfg.seed)
    return evaluate_metrics(
        cfg.model, params, eval_set,
        k_shots=cfg.k_shots, m_targets=cfg.m_resolved,
        alpha_eval=cfg.eval_alpha, seed=cfg.seed,
    )


def train(cfg: TrainConfig, out_dir: str | Path) -> TrainResult:
    """Run the configured loop; fully reproducible from (cfg, seed).

    The run directory receives a canonical config snapshot, trace.csv,
    eval_######.json files at the configured cadence, the final checkpoint
    (plus JSON sidecar), and run_meta.json."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(train_config_to_dict(cfg), sort_keys=True, indent=2) + "\n"
    )

    params = init_params(cfg.model, task_rng(cfg.seed, INIT_STREAM))
    optimizer = make_optimizer(cfg.outer, len(params))
    step = maml_meta_step if isinstance(cfg.model, ModelSpec) else cnp_meta_step

    trace: list[TraceRecord] = []
    try:
        for it in range(cfg.iterations):
            tasks = sample_train_batch(cfg, it)
            params, _, record = step(params, tasks, cfg, optimizer, iteration=it)
            trace.append(record)
            if (
                cfg.eval_every
                and (it + 1) % cfg.eval_every == 0
                and (it + 1) < cfg.iterations
            ):
                report = _evaluate(cfg, params)
                write_metrics_json(run_dir / f"eval_{it + 1:06d}.json", report)
    finally:
        # partial outputs are flushed even when a step aborts
        write_trace_csv(run_dir / "trace.csv", trace)

    final_report = _evaluate(cfg, params)
    write_metrics_json(run_dir / f"eval_{cfg.iterations:06d}.json", final_report)
    save_checkpoint(
        run_dir / "checkpoint_final.ckpt", cfg.model, params,
        seed=cfg.seed, iteration=cfg.iterations,
    )
    alpha = cfg.trace_alpha
    (run_dir / "run_meta.json").write_text(
        json.dumps(
            {
                "package_version": __version__,
                "kernel_backend": kernels.BACKEND,
                # computable factor of the quantile-error condition for
                # surrogate descent; the CDF Lipschitz constant itself is
                # not observable
                "improvement_bound_factor": cfg.outer.lr / (1.0 - alpha) ** 2,
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    return TrainResult(
        params=params,
        trace=tuple(trace),
        run_dir=run_dir,
        final_metrics=final_report,
    )
