"""Command-line surface: train, eval, sweep, landscape, selftest.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, load_experiment
from .evalreport import (
    RunMetrics,
    compare_runs,
    default_histogram,
    evaluate_metrics,
    landscape,
    write_comparison_csv,
    write_histogram_csv,
    write_landscape_csv,
    write_metrics_json,
)
from .models import CNPSpec, ModelSpec, load_checkpoint
from .selftest import run_selftest
from .tasks import GPConfig, SineDistConfig, build_test_grid, sample_gp_eval_set
from .train import TrainingError, train


def _run_name(principle_kind: str, seed: int) -> str:
    return f"{principle_kind}_seed{seed}"


def cmd_train(args) -> int:
    cfg = load_experiment(args.config)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    for seed in seeds:
        run_dir = out / _run_name(cfg.principle.kind, seed)
        result = train(cfg.train_config(seed), run_dir)
        m = result.final_metrics
        print(
            f"{run_dir}: average={m.average:.4f} worst={m.worst:.4f} "
            f"cvar[{m.alpha_eval:g}]={m.cvar:.4f}"
        )
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(ckpt.spec, ModelSpec):
        tasks = build_test_grid(SineDistConfig(), args.n_amplitude, args.n_phase)
        extra = {"inner_lr": args.inner_lr}
    else:
        tasks = sample_gp_eval_set(GPConfig(), args.n_tasks, args.seed)
        extra = {}
    for alpha in args.alphas:
        report = evaluate_metrics(
            ckpt.spec, ckpt.params, tasks,
            k_shots=args.k, m_targets=args.m if args.m else args.k,
            alpha_eval=alpha, seed=args.seed, **extra,
        )
        path = write_metrics_json(out / f"metrics_alpha_{alpha:g}.json", report)
        print(
            f"{path}: average={report.average:.4f} worst={report.worst:.4f} "
            f"cvar[{alpha:g}]={report.cvar:.4f}"
        )
    return 0


def _sweep_job(train_cfg, run_dir):
    result = train(train_cfg, run_dir)
    return result.final_metrics


def cmd_sweep(args) -> int:
    cfg = load_experiment(args.config)
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds] if args.seeds else list(cfg.seeds)
    if not args.values:
        print("sweep: --values must be non-empty", file=sys.stderr)
        return 2

    jobs = []
    for value in args.values:
        for seed in seeds:
            if args.axis == "alpha":
                tc = cfg.train_config(
                    seed,
                    principle=replace(cfg.principle, alpha=float(value)),
                    eval_alpha=float(value) if args.eval_at_value else cfg.eval.alphas[0],
                )
                name = f"alpha{float(value):g}_seed{seed}"
            else:
                tc = cfg.train_config(seed, batch_size=int(value))
                name = f"batch{int(value)}_seed{seed}"
            jobs.append((value, seed, tc, out / name))

    rows = []
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futures = [pool.submit(_sweep_job, tc, rd) for _, _, tc, rd in jobs]
            for (value, seed, _, rd), fut in zip(jobs, futures):
                rows.append(_sweep_row(value, seed, rd, fut))
    else:
        for value, seed, tc, rd in jobs:
            try:
                metrics = _sweep_job(tc, rd)
                rows.append(_row_ok(value, seed, metrics))
            except Exception as exc:
                rows.append(_row_failed(value, seed, exc))

    _write_sweep_csv(out / "sweep_summary.csv", args.axis, rows)
    n_failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{out / 'sweep_summary.csv'}: {len(rows)} runs, {n_failed} failed")
    return 0 if n_failed == 0 else 1


def _sweep_row(value, seed, run_dir, future):
    try:
        return _row_ok(value, seed, future.result())
    except Exception as exc:
        return _row_failed(value, seed, exc)


def _row_ok(value, seed, metrics):
    return {
        "value": value, "seed": seed, "status": "ok",
        "average": metrics.average, "worst": metrics.worst, "cvar": metrics.cvar,
        "error": "",
    }


def _row_failed(value, seed, exc):
    return {
        "value": value, "seed": seed, "status": "failed",
        "average": "", "worst": "", "cvar": "", "error": str(exc),
    }


def _write_sweep_csv(path, axis, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([axis, "seed", "status", "average", "worst", "cvar", "error"])
        for r in rows:
            writer.writerow(
                [r["value"], r["seed"], r["status"],
                 repr(r["average"]) if isinstance(r["average"], float) else r["average"],
                 repr(r["worst"]) if isinstance(r["worst"], float) else r["worst"],
                 repr(r["cvar"]) if isinstance(r["cvar"], float) else r["cvar"],
                 r["error"]]
            )


def cmd_landscape(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not isinstance(ckpt.spec, ModelSpec):
        print("landscape requires an mlp checkpoint", file=sys.stderr)
        return 2
    grid = landscape(
        ckpt.spec, ckpt.params,
        np.linspace(0.1, 5.0, args.n_amplitude),
        np.linspace(0.0, 2.0 * np.pi, args.n_phase),
        k_shots=args.k, m_targets=args.m if args.m else args.k,
        inner_lr=args.inner_lr, seed=args.seed,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_landscape_csv(out, grid)
    print(f"{out}: {grid.mse.shape[0]}x{grid.mse.shape[1]} adaptation-loss grid")
    return 0


def cmd_selftest(args) -> int:
    results = run_selftest(report_dir=args.out)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drmeta",
        description="Tail-risk training and evaluation for meta-learning models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run training for every configured seed")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config out_dir")
    p.add_argument("--seed", type=int, default=None, help="train a single seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test task set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.7])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--inner-lr", type=float, default=0.01)
    p.add_argument("--n-amplitude", type=int, default=49)
    p.add_argument("--n-phase", type=int, default=10)
    p.add_argument("--n-tasks", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train across one axis and summarize")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["alpha", "batch_size"])
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--eval-at-value", action="store_true",
                   help="evaluate each alpha-sweep run at its own alpha")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("landscape", help="post-adaptation MSE over (a, b)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-amplitude", type=int, default=49)
    p.add_argument("--n-phase", type=int, default=10)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--inner-lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("selftest", help="run the theory self-check suites")
    p.add_argument("--out", default=None, help="directory for CSV reports")
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
