"""Declarative experiment configs (YAML) with strict validation.

Unknown keys are rejected with their full path so sweep overrides cannot
silently typo a field. One config describes a family of runs: the model,
the risk principle, training hyperparameters, the task distribution, the
evaluation protocol, and the seed list.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .models import CNPSpec, ModelSpec
from .risk import PrincipleConfig
from .tasks import GPConfig, SineDistConfig
from .train import OptimizerConfig, TrainConfig


class ConfigError(ValueError):
    pass


_MISSING = object()


def _section(data: dict, key: str, path: str) -> dict:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{path}{key}: expected a mapping")
    return value


def _check_keys(data: dict, allowed: set[str], path: str) -> None:
    for key in data:
        if key not in allowed:
            raise ConfigError(f"{path}{key}: unknown key")


def _get(data: dict, key: str, path: str, kind, default=_MISSING):
    if key not in data:
        if default is _MISSING:
            raise ConfigError(f"{path}{key}: required field is missing")
        return default
    value = data[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{path}{key}: expected {kind.__name__}")
    if not isinstance(value, kind):
        raise ConfigError(f"{path}{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _get_pair(data: dict, key: str, path: str, default=_MISSING):
    raw = _get(data, key, path, list, default)
    if raw is default and default is not _MISSING:
        return default
    if len(raw) != 2:
        raise ConfigError(f"{path}{key}: expected [lo, hi]")
    return (float(raw[0]), float(raw[1]))


def _parse_model(data: dict, path: str = "model."):
    _check_keys(
        data,
        {"kind", "layer_widths", "activation", "x_dim", "y_dim",
         "encoder_widths", "decoder_widths", "var_floor"},
        path,
    )
    kind = _get(data, "kind", path, str, "mlp")
    try:
        if kind == "mlp":
            return ModelSpec(
                layer_widths=tuple(_get(data, "layer_widths", path, list, [1, 40, 40, 1])),
                activation=_get(data, "activation", path, str, "relu"),
            )
        if kind == "cnp":
            return CNPSpec(
                x_dim=_get(data, "x_dim", path, int, 1),
                y_dim=_get(data, "y_dim", path, int, 1),
                encoder_widths=tuple(_get(data, "encoder_widths", path, list, [128, 128, 128])),
                decoder_widths=tuple(_get(data, "decoder_widths", path, list, [128, 128])),
                activation=_get(data, "activation", path, str, "relu"),
                var_floor=_get(data, "var_floor", path, float, 1e-6),
            )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}kind: must be 'mlp' or 'cnp', got {kind!r}")


def _parse_principle(data: dict, path: str = "principle.") -> PrincipleConfig:
    _check_keys(data, {"kind", "alpha", "temperature"}, path)
    try:
        return PrincipleConfig(
            kind=_get(data, "kind", path, str),
            alpha=_get(data, "alpha", path, float, 0.0),
            temperature=_get(data, "temperature", path, float, 1.0),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_outer(data: dict, path: str = "train.outer.") -> OptimizerConfig:
    _check_keys(data, {"kind", "lr", "beta1", "beta2", "eps"}, path)
    try:
        return OptimizerConfig(
            kind=_get(data, "kind", path, str, "adam"),
            lr=_get(data, "lr", path, float, 1e-3),
            beta1=_get(data, "beta1", path, float, 0.9),
            beta2=_get(data, "beta2", path, float, 0.999),
            eps=_get(data, "eps", path, float, 1e-8),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_tasks(data: dict, path: str = "tasks."):
    kind = _get(data, "kind", path, str, "sinusoid")
    try:
        if kind == "sinusoid":
            _check_keys(
                data,
                {"kind", "p_hard", "easy_amplitude", "hard_amplitude",
                 "train_phase", "x_range", "amplitude_range", "phase_range"},
                path,
            )
            base = SineDistConfig()
            return SineDistConfig(
                p_hard=_get(data, "p_hard", path, float, base.p_hard),
                easy_amplitude=_get_pair(data, "easy_amplitude", path, base.easy_amplitude),
                hard_amplitude=_get_pair(data, "hard_amplitude", path, base.hard_amplitude),
                train_phase=_get_pair(data, "train_phase", path, base.train_phase),
                x_range=_get_pair(data, "x_range", path, base.x_range),
                amplitude_range=_get_pair(data, "amplitude_range", path, base.amplitude_range),
                phase_range=_get_pair(data, "phase_range", path, base.phase_range),
            ), None
        if kind == "gp_curves":
            _check_keys(
                data,
                {"kind", "grid_size", "x_range", "length_scale",
                 "signal_variance", "context_range", "jitter"},
                path,
            )
            base = GPConfig()
            ctx = _get(data, "context_range", path, list, list(base.context_range))
            return None, GPConfig(
                grid_size=_get(data, "grid_size", path, int, base.grid_size),
                x_range=_get_pair(data, "x_range", path, base.x_range),
                length_scale=_get(data, "length_scale", path, float, base.length_scale),
                signal_variance=_get(data, "signal_variance", path, float, base.signal_variance),
                context_range=(int(ctx[0]), int(ctx[1])),
                jitter=_get(data, "jitter", path, float, base.jitter),
            )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raise ConfigError(f"{path}kind: must be 'sinusoid' or 'gp_curves', got {kind!r}")


@dataclass(frozen=True)
class EvalConfig:
    alphas: tuple[float, ...] = (0.7,)
    n_amplitude: int = 49
    n_phase: int = 10
    n_tasks: int = 64


def _parse_eval(data: dict, path: str = "eval.") -> EvalConfig:
    _check_keys(data, {"alphas", "n_amplitude", "n_phase", "n_tasks"}, path)
    alphas = tuple(float(a) for a in _get(data, "alphas", path, list, [0.7]))
    for a in alphas:
        if not 0.0 <= a < 1.0:
            raise ConfigError(f"{path}alphas: {a} outside [0, 1)")
    return EvalConfig(
        alphas=alphas,
        n_amplitude=_get(data, "n_amplitude", path, int, 49),
        n_phase=_get(data, "n_phase", path, int, 10),
        n_tasks=_get(data, "n_tasks", path, int, 64),
    )


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str
    seeds: tuple[int, ...]
    model: ModelSpec | CNPSpec
    principle: PrincipleConfig
    train_kwargs: dict
    sine: SineDistConfig | None
    gp: GPConfig | None
    eval: EvalConfig

    def train_config(self, seed: int, *, principle: PrincipleConfig | None = None,
                     **overrides) -> TrainConfig:
        kwargs = dict(self.train_kwargs)
        kwargs.update(overrides)
        return TrainConfig(
            model=self.model,
            principle=principle if principle is not None else self.principle,
            seed=seed,
            sine=self.sine,
            gp=self.gp,
            eval_alpha=self.eval.alphas[0],
            eval_tasks=self.eval.n_tasks,
            grid_amplitudes=self.eval.n_amplitude,
            grid_phases=self.eval.n_phase,
            **kwargs,
        )


_TOP_KEYS = {"out_dir", "seeds", "model", "principle", "train", "tasks", "eval"}
_TRAIN_KEYS = {"iterations", "batch_size", "k_shots", "m_targets", "inner_lr",
               "inner_steps", "gradient_mode", "eval_every", "outer"}


def parse_experiment(data: Any, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(data, _TOP_KEYS, "")
    out_dir = _get(data, "out_dir", "", str)
    seeds_raw = _get(data, "seeds", "", list, [0])
    seeds = tuple(int(s) for s in seeds_raw)
    if not seeds:
        raise ConfigError("seeds: must list at least one seed")

    model = _parse_model(_section(data, "model", ""))
    principle = _parse_principle(_section(data, "principle", ""))
    sine, gp = _parse_tasks(_section(data, "tasks", ""))
    if isinstance(model, ModelSpec) and gp is not None:
        raise ConfigError("tasks.kind: gp_curves requires a cnp model")
    if isinstance(model, CNPSpec) and sine is not None:
        raise ConfigError("tasks.kind: sinusoid requires an mlp model")

    tr = _section(data, "train", "")
    _check_keys(tr, _TRAIN_KEYS, "train.")
    train_kwargs = {
        "iterations": _get(tr, "iterations", "train.", int),
        "batch_size": _get(tr, "batch_size", "train.", int, 25),
        "k_shots": _get(tr, "k_shots", "train.", int, 5),
        "m_targets": _get(tr, "m_targets", "train.", int, None),
        "inner_lr": _get(tr, "inner_lr", "train.", float, 0.01),
        "inner_steps": _get(tr, "inner_steps", "train.", int, 1),
        "gradient_mode": _get(tr, "gradient_mode", "train.", str, "exact"),
        "eval_every": _get(tr, "eval_every", "train.", int, 0),
        "outer": _parse_outer(_section(tr, "outer", "train.")),
    }
    if train_kwargs["m_targets"] is None:
        train_kwargs.pop("m_targets")

    cfg = ExperimentConfig(
        out_dir=out_dir,
        seeds=seeds,
        model=model,
        principle=principle,
        train_kwargs=train_kwargs,
        sine=sine,
        gp=gp,
        eval=_parse_eval(_section(data, "eval", "")),
    )
    try:
        cfg.train_config(seeds[0])  # validate the assembled TrainConfig early
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_experiment(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return parse_experiment(data, source=str(path))
