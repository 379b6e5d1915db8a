"""Model families: the regression MLP (one-step adaptation) and the
conditional neural process (set encoder + Gaussian decoder), both expressed
over the autodiff engine with flat parameter vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import LossFn, ParamLayout, ParamVector, LayoutField, Tensor

Array = np.ndarray

ACTIVATIONS = ("relu", "tanh")
ACT_CODES = {"relu": 0, "tanh": 1}

CHECKPOINT_MAGIC = b"DRMK"
CHECKPOINT_VERSION = 1


def _chain_fields(prefix: str, widths: tuple[int, ...], offset: int):
    fields = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        fields.append(LayoutField(f"{prefix}W{i}", (fan_in, fan_out), offset))
        offset += fan_in * fan_out
        fields.append(LayoutField(f"{prefix}b{i}", (fan_out,), offset))
        offset += fan_out
    return fields, offset


def _chain_param_count(widths: tuple[int, ...]) -> int:
    return sum((widths[i] + 1) * widths[i + 1] for i in range(len(widths) - 1))


@dataclass(frozen=True)
class ModelSpec:
    """Fully-connected regression network, e.g. 1-40-40-1 ReLU for sinusoids."""

    layer_widths: tuple[int, ...] = (1, 40, 40, 1)
    activation: str = "relu"
    kind: str = field(default="mlp", init=False)

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("layer_widths needs at least input and output")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    @property
    def param_count(self) -> int:
        return _chain_param_count(self.layer_widths)

    def layout(self) -> ParamLayout:
        fields, _ = _chain_fields("", self.layer_widths, 0)
        return ParamLayout(tuple(fields))


def sinusoid_mlp() -> ModelSpec:
    return ModelSpec(layer_widths=(1, 40, 40, 1), activation="relu")


@dataclass(frozen=True)
class CNPSpec:
    """Conditional neural process: per-point encoder, mean aggregation over
    the context set, and a decoder emitting a Gaussian mean and raw variance
    per target input. Variance is softplus(raw) + var_floor."""

    x_dim: int = 1
    y_dim: int = 1
    encoder_widths: tuple[int, ...] = (128, 128, 128)
    decoder_widths: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    var_floor: float = 1e-6
    kind: str = field(default="cnp", init=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.var_floor <= 0:
            raise ValueError("var_floor must be positive")
        if not self.encoder_widths or not self.decoder_widths:
            raise ValueError("encoder/decoder widths must be non-empty")
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))

    @property
    def repr_dim(self) -> int:
        return self.encoder_widths[-1]

    @property
    def encoder_chain(self) -> tuple[int, ...]:
        return (self.x_dim + self.y_dim, *self.encoder_widths)

    @property
    def decoder_chain(self) -> tuple[int, ...]:
        return (self.repr_dim + self.x_dim, *self.decoder_widths, 2 * self.y_dim)

    @property
    def param_count(self) -> int:
        return _chain_param_count(self.encoder_chain) + _chain_param_count(self.decoder_chain)

    def layout(self) -> ParamLayout:
        enc, offset = _chain_fields("enc_", self.encoder_chain, 0)
        dec, _ = _chain_fields("dec_", self.decoder_chain, offset)
        return ParamLayout(tuple(enc + dec))


AnySpec = Union[ModelSpec, CNPSpec]


def init_params(spec: AnySpec, rng: np.random.Generator) -> ParamVector:
    """Uniform [-s, s] per layer with s = sqrt(6 / (fan_in + fan_out))."""
    layout = spec.layout()
    values = np.empty(layout.size, dtype=np.float64)
    # layout alternates weight/bias fields per layer
    for wf, bf in zip(layout.fields[0::2], layout.fields[1::2]):
        fan_in, fan_out = wf.shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        values[wf.offset : wf.offset + wf.size] = rng.uniform(-s, s, size=wf.size)
        values[bf.offset : bf.offset + bf.size] = rng.uniform(-s, s, size=bf.size)
    return ParamVector(values, layout)


# --- forward passes -----------------------------------------------------------


def _chain_forward_np(values: Array, layout: ParamLayout, prefix: str,
                      n_layers: int, activation: str, x: Array) -> Array:
    act = np.tanh if activation == "tanh" else lambda a: np.maximum(a, 0.0)
    h = x
    for i in range(n_layers):
        w = layout.view(values, f"{prefix}W{i}")
        b = layout.view(values, f"{prefix}b{i}")
        a = h @ w + b
        h = act(a) if i < n_layers - 1 else a
    return h


def _chain_forward_tensor(theta: Tensor, layout: ParamLayout, prefix: str,
                          n_layers: int, activation: str, x: Tensor) -> Tensor:
    act = ad.tanh if activation == "tanh" else ad.relu
    h = x
    for i in range(n_layers):
        fw = layout.field(f"{prefix}W{i}")
        fb = layout.field(f"{prefix}b{i}")
        w = ad.reshape(theta[fw.offset : fw.offset + fw.size], fw.shape)
        b = theta[fb.offset : fb.offset + fb.size]
        a = ad.add(ad.matmul(h, w), b)
        h = act(a) if i < n_layers - 1 else a
    return h


def evaluate(spec: ModelSpec, params: ParamVector, inputs: Array) -> Array:
    """Deterministic forward pass; one output row per input row."""
    if not isinstance(spec, ModelSpec):
        raise TypeError("evaluate applies to feed-forward ModelSpec models")
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ValueError(
            f"inputs must be (n, {spec.in_dim}), got {x.shape}"
        )
    if len(params) != spec.param_count:
        raise ValueError(
            f"params length {len(params)} does not match model ({spec.param_count})"
        )
    return _chain_forward_np(
        params.values, params.layout, "", len(spec.layer_widths) - 1, spec.activation, x
    )


def mlp_forward_tensor(spec: ModelSpec, theta: Tensor, inputs: Array) -> Tensor:
    return _chain_forward_tensor(
        theta, spec.layout(), "", len(spec.layer_widths) - 1, spec.activation,
        ad.constant(np.asarray(inputs, dtype=np.float64)),
    )


def mlp_preactivations(spec: ModelSpec, params: ParamVector, inputs: Array) -> list[Array]:
    """Hidden-layer preactivations; used to detect ReLU kinks in checks."""
    act = np.tanh if spec.activation == "tanh" else lambda a: np.maximum(a, 0.0)
    h = np.asarray(inputs, dtype=np.float64)
    pre = []
    n_layers = len(spec.layer_widths) - 1
    for i in range(n_layers):
        a = h @ params.view(f"W{i}") + params.view(f"b{i}")
        if i < n_layers - 1:
            pre.append(a)
            h = act(a)
        else:
            h = a
    return pre


def mlp_task_loss(spec: ModelSpec, x: Array, y: Array) -> LossFn:
    """Mean squared error over the given points, as a differentiable scalar
    function of the flat parameter tensor."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0:
        raise ValueError("task data must be non-empty")
    y_const = ad.constant(y)

    def loss(theta: Tensor) -> Tensor:
        pred = mlp_forward_tensor(spec, theta, x)
        return ad.tmean(ad.square(ad.sub(pred, y_const)))

    return loss


# --- CNP ----------------------------------------------------------------------


def canonical_context_order(context_x: Array, context_y: Array) -> np.ndarray:
    """Indices sorting context rows lexicographically by (x, y); aggregation
    in this fixed order makes the encoder bitwise permutation-invariant."""
    cx = np.asarray(context_x, dtype=np.float64).reshape(len(context_x), -1)
    cy = np.asarray(context_y, dtype=np.float64).reshape(len(context_y), -1)
    keys = np.concatenate([cx, cy], axis=1)
    return np.lexsort(keys[:, ::-1].T)


def cnp_forward_tensor(
    spec: CNPSpec, theta: Tensor, context_x: Array, context_y: Array, target_x: Array
) -> tuple[Tensor, Tensor]:
    cx = np.asarray(context_x, dtype=np.float64).reshape(-1, spec.x_dim)
    cy = np.asarray(context_y, dtype=np.float64).reshape(-1, spec.y_dim)
    tx = np.asarray(target_x, dtype=np.float64).reshape(-1, spec.x_dim)
    if cx.shape[0] == 0:
        raise ValueError("context must be non-empty")
    order = canonical_context_order(cx, cy)
    pairs = np.concatenate([cx[order], cy[order]], axis=1)

    layout = spec.layout()
    enc = _chain_forward_tensor(
        theta, layout, "enc_", len(spec.encoder_chain) - 1, spec.activation,
        ad.constant(pairs),
    )
    z = ad.tmean(enc, axis=0, keepdims=True)  # (1, repr_dim)
    z_tiled = ad.broadcast_to(z, (tx.shape[0], spec.repr_dim))
    dec_in = ad.concat([z_tiled, ad.constant(tx)], axis=1)
    out = _chain_forward_tensor(
        theta, layout, "dec_", len(spec.decoder_chain) - 1, spec.activation, dec_in
    )
    mean = out[:, : spec.y_dim]
    raw = out[:, spec.y_dim :]
    var = ad.add(ad.softplus(raw), ad.constant(spec.var_floor))
    return mean, var


def cnp_forward(
    spec: CNPSpec, params: ParamVector, context_x: Array, context_y: Array, target_x: Array
) -> tuple[Array, Array]:
    """Condition on the context set and predict Gaussian (mean, variance)
    at each target input. Invariant to context ordering."""
    mean, var = cnp_forward_tensor(
        spec, Tensor(np.array(params.values)), context_x, context_y, target_x
    )
    return mean.data.copy(), var.data.copy()


def gaussian_nll(mean: Array, var: Array, y: Array) -> Array:
    """Pointwise negative Gaussian log-likelihood."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * np.log(2.0 * np.pi * var) + (y - mean) ** 2 / (2.0 * var)


def _gaussian_nll_tensor(mean: Tensor, var: Tensor, y_const: Tensor) -> Tensor:
    two_pi = ad.constant(2.0 * np.pi)
    half = ad.constant(0.5)
    quad = ad.div(ad.square(ad.sub(y_const, mean)), ad.mul(ad.constant(2.0), var))
    return ad.add(ad.mul(half, ad.log(ad.mul(two_pi, var))), quad)


def cnp_task_loss(
    spec: CNPSpec, context_x: Array, context_y: Array, target_x: Array, target_y: Array
) -> LossFn:
    """Mean negative Gaussian log-likelihood over the target set."""
    ty = np.asarray(target_y, dtype=np.float64).reshape(-1, spec.y_dim)
    if np.asarray(context_x).size == 0 or ty.size == 0:
        raise ValueError("context and target must be non-empty")
    ty_const = ad.constant(ty)

    def loss(theta: Tensor) -> Tensor:
        mean, var = cnp_forward_tensor(spec, theta, context_x, context_y, target_x)
        return ad.tmean(_gaussian_nll_tensor(mean, var, ty_const))

    return loss


# --- checkpoints ---------------------------------------------------------------


def spec_to_dict(spec: AnySpec) -> dict:
    if isinstance(spec, ModelSpec):
        return {
            "kind": "mlp",
            "layer_widths": list(spec.layer_widths),
            "activation": spec.activation,
        }
    return {
        "kind": "cnp",
        "x_dim": spec.x_dim,
        "y_dim": spec.y_dim,
        "encoder_widths": list(spec.encoder_widths),
        "decoder_widths": list(spec.decoder_widths),
        "activation": spec.activation,
        "var_floor": spec.var_floor,
    }


def spec_from_dict(d: dict) -> AnySpec:
    kind = d.get("kind")
    if kind == "mlp":
        return ModelSpec(
            layer_widths=tuple(d["layer_widths"]), activation=d["activation"]
        )
    if kind == "cnp":
        return CNPSpec(
            x_dim=d["x_dim"],
            y_dim=d["y_dim"],
            encoder_widths=tuple(d["encoder_widths"]),
            decoder_widths=tuple(d["decoder_widths"]),
            activation=d["activation"],
            var_floor=d["var_floor"],
        )
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(
    path: str | Path,
    spec: AnySpec,
    params: ParamVector,
    *,
    seed: int,
    iteration: int,
    extra: dict | None = None,
) -> Path:
    """Binary layout: magic 'DRMK', u32 version, u32 header length, UTF-8
    JSON header, then the raw little-endian float64 parameter vector.
    A JSON sidecar with the same header is written next to the file."""
    path = Path(path)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "spec": spec_to_dict(spec),
        "seed": int(seed),
        "iteration": int(iteration),
        "param_count": len(params),
        "dtype": "<f8",
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    return path


@dataclass(frozen=True)
class Checkpoint:
    spec: AnySpec
    params: ParamVector
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a model checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    spec = spec_from_dict(header["spec"])
    values = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    if values.size != header["param_count"] or values.size != spec.param_count:
        raise ValueError("checkpoint parameter count does not match its spec")
    params = ParamVector(values.astype(np.float64), spec.layout())
    return Checkpoint(spec=spec, params=params, meta=header)
