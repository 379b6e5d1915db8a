"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small eager tape: every operation records its parents and vector-Jacobian
closures, and the closures themselves build tape nodes. Gradients are
therefore differentiable, and running ``grad`` twice yields the exact
second-order term needed for one-inner-step meta-gradients.

Supported primitives: affine pieces (matmul/add/mul/...), relu, tanh,
square, sum/mean, log, exp, softplus, plus the shape plumbing (reshape,
broadcast, concat, slicing) required to express set-encoder models.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN/Inf; ``op`` names the offender."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite result in primitive '{op}'"
        super().__init__(msg + (f" ({detail})" if detail else ""))


_CHECK_FINITE = contextvars.ContextVar("drmeta_check_finite", default=False)


@contextlib.contextmanager
def finite_checks(enabled: bool = True):
    """Enable per-primitive NaN/Inf checks inside the ``with`` block."""
    token = _CHECK_FINITE.set(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE.reset(token)


class Tensor:
    """One tape node: a float64 array plus links to the op that made it."""

    __slots__ = ("data", "parents", "vjps", "op")

    def __init__(self, data, parents=(), vjps=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.op = op
        if _CHECK_FINITE.get() and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(op)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"


def constant(x) -> Tensor:
    return Tensor(x, op="const")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _node(data, parents, vjps, op) -> Tensor:
    return Tensor(data, parents=parents, vjps=vjps, op=op)


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce ``t`` back to ``shape`` after numpy broadcasting."""
    if t.shape == shape:
        return t
    extra = t.data.ndim - len(shape)
    if extra > 0:
        t = tsum(t, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    if t.shape != shape:
        t = reshape(t, shape)
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data + b.data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data - b.data,
        (a, b),
        (lambda g: _sum_to(g, a.shape), lambda g: _sum_to(neg(g), b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data * b.data,
        (a, b),
        (lambda g: _sum_to(mul(g, b), a.shape), lambda g: _sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data / b.data,
        (a, b),
        (
            lambda g: _sum_to(div(g, b), a.shape),
            lambda g: _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape),
        ),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), (lambda g: neg(g),), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data @ b.data,
        (a, b),
        (
            lambda g: _sum_to(matmul(g, swapaxes(b, -1, -2)), a.shape),
            lambda g: _sum_to(matmul(swapaxes(a, -1, -2), g), b.shape),
        ),
        "matmul",
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _node(
        np.swapaxes(a.data, i, j),
        (a,),
        (lambda g: swapaxes(g, i, j),),
        "swapaxes",
    )


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(
        a.data.reshape(shape),
        (a,),
        (lambda g: reshape(g, a.shape),),
        "reshape",
    )


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(
        np.broadcast_to(a.data, shape),
        (a,),
        (lambda g: _sum_to(g, a.shape),),
        "broadcast_to",
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        axes = tuple(range(a.data.ndim))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % a.data.ndim for ax in axes)

    def vjp(g: Tensor) -> Tensor:
        gg = g
        if not keepdims and a.data.ndim:
            kd = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            gg = reshape(gg, kd)
        return broadcast_to(gg, a.shape)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), (vjp,), "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax % a.data.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0 (strict > in the mask)
    mask = constant((a.data > 0.0).astype(np.float64))
    return _node(np.maximum(a.data, 0.0), (a,), (lambda g: mul(g, mask),), "relu")


def tanh(a: Tensor) -> Tensor:
    out = _node(np.tanh(a.data), (a,), (), "tanh")
    out.vjps = (lambda g: mul(g, sub(constant(1.0), mul(out, out))),)
    return out


def exp(a: Tensor) -> Tensor:
    out = _node(np.exp(a.data), (a,), (), "exp")
    out.vjps = (lambda g: mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), (lambda g: div(g, a),), "log")


def square(a: Tensor) -> Tensor:
    return _node(
        a.data * a.data,
        (a,),
        (lambda g: mul(g, mul(constant(2.0), a)),),
        "square",
    )


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        t = np.exp(-np.abs(a.data))
    data = np.where(a.data >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = _node(data, (a,), (), "sigmoid")
    out.vjps = (lambda g: mul(g, mul(out, sub(constant(1.0), out))),)
    return out


def softplus(a: Tensor) -> Tensor:
    return _node(
        np.logaddexp(0.0, a.data),
        (a,),
        (lambda g: mul(g, sigmoid(a)),),
        "softplus",
    )


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % data.ndim
    offsets = np.cumsum([0] + [p.shape[ax] for p in parts])

    def make_vjp(i: int):
        sl = tuple(
            slice(offsets[i], offsets[i + 1]) if d == ax else slice(None)
            for d in range(data.ndim)
        )
        return lambda g: getitem(g, sl)

    return _node(data, parts, tuple(make_vjp(i) for i in range(len(parts))), "concat")


def getitem(a: Tensor, idx) -> Tensor:
    return _node(a.data[idx], (a,), (lambda g: _unslice(g, idx, a.shape),), "getitem")


def _unslice(g: Tensor, idx, shape) -> Tensor:
    data = np.zeros(shape, dtype=np.float64)
    data[idx] = g.data
    return _node(data, (g,), (lambda h: getitem(h, idx),), "unslice")


def _toposort(output: Tensor) -> list[Tensor]:
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return topo


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Cotangents of a scalar ``output`` w.r.t. ``wrt`` as new tape nodes."""
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    topo = _toposort(output)
    cot: dict[int, Tensor] = {id(output): constant(np.ones_like(output.data))}
    for node in reversed(topo):
        g = cot.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            pg = vjp(g)
            acc = cot.get(id(parent))
            cot[id(parent)] = pg if acc is None else add(acc, pg)
    return [
        cot.get(id(w)) if cot.get(id(w)) is not None else constant(np.zeros_like(w.data))
        for w in wrt
    ]


# --- flat parameter vectors -------------------------------------------------


@dataclass(frozen=True)
class LayoutField:
    """Index range of one named parameter block inside the flat vector."""

    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ParamLayout:
    fields: tuple[LayoutField, ...]

    @property
    def size(self) -> int:
        if not self.fields:
            return 0
        last = self.fields[-1]
        return last.offset + last.size

    def field(self, name: str) -> LayoutField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def view(self, values: Array, name: str) -> Array:
        f = self.field(name)
        return values[f.offset : f.offset + f.size].reshape(f.shape)


def _validated_flat(values, size: int, what: str) -> Array:
    v = np.ascontiguousarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{what} must be a flat vector, got shape {v.shape}")
    if v.size != size:
        raise ValueError(f"{what} has length {v.size}, layout expects {size}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{what} contains non-finite entries")
    v = v.copy()
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 model parameters; immutable and always finite."""

    values: Array
    layout: ParamLayout

    def __post_init__(self):
        object.__setattr__(
            self, "values", _validated_flat(self.values, self.layout.size, "ParamVector")
        )

    def view(self, name: str) -> Array:
        return self.layout.view(self.values, name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class GradVector:
    """Derivative w.r.t. a ParamVector, sharing its layout."""

    values: Array
    layout: ParamLayout

    def __post_init__(self):
        object.__setattr__(
            self, "values", _validated_flat(self.values, self.layout.size, "GradVector")
        )

    def view(self, name: str) -> Array:
        return self.layout.view(self.values, name)

    def __len__(self) -> int:
        return self.values.size


# --- public differentiation entry points ------------------------------------

LossFn = Callable[[Tensor], Tensor]


def value_and_gradient(
    loss: LossFn, params: ParamVector, *, check_finite: bool = True
) -> tuple[float, GradVector]:
    with finite_checks(check_finite):
        theta = Tensor(np.array(params.values))
        value = loss(theta)
        (g,) = grad(value, [theta])
    return value.item(), GradVector(g.data, params.layout)


def gradient(loss: LossFn, params: ParamVector, *, check_finite: bool = True) -> GradVector:
    """Exact reverse-mode derivative of a scalar loss at ``params``."""
    return value_and_gradient(loss, params, check_finite=check_finite)[1]


@dataclass(frozen=True)
class MetaGradient:
    grad: GradVector
    adapted: ParamVector
    outer_value: float


def meta_gradient(
    inner_loss: LossFn,
    outer_loss: LossFn,
    params: ParamVector,
    inner_lr: float,
    mode: str = "exact",
    *,
    check_finite: bool = True,
) -> MetaGradient:
    """Derivative of ``outer_loss`` through one inner gradient step.

    The adapted point is ``theta - inner_lr * d(inner_loss)/d(theta)``.
    ``exact`` differentiates through the inner step (second-order term
    included); ``first_order`` treats the adapted point as a constant.
    """
    if inner_lr <= 0:
        raise ValueError("inner_lr must be positive")
    if mode not in ("exact", "first_order"):
        raise ValueError(f"unknown meta-gradient mode {mode!r}")
    with finite_checks(check_finite):
        theta = Tensor(np.array(params.values))
        inner_value = inner_loss(theta)
        (inner_grad,) = grad(inner_value, [theta])
        try:
            adapted = sub(theta, mul(constant(inner_lr), inner_grad))
        except NonFiniteError as exc:
            raise NonFiniteError("inner_adapt", f"via '{exc.op}'") from exc
        if not np.all(np.isfinite(adapted.data)):
            raise NonFiniteError("inner_adapt")
        if mode == "first_order":
            leaf = Tensor(np.array(adapted.data))
            outer_value = outer_loss(leaf)
            (mg,) = grad(outer_value, [leaf])
        else:
            outer_value = outer_loss(adapted)
            (mg,) = grad(outer_value, [theta])
    return MetaGradient(
        grad=GradVector(mg.data, params.layout),
        adapted=ParamVector(adapted.data, params.layout),
        outer_value=outer_value.item(),
    )


# --- finite-difference oracle -----------------------------------------------


def finite_difference_gradient(
    f: Callable[[Array], float], x: Array, h: float = 1e-5
) -> Array:
    """Central differences of a scalar function; the independent check for
    every reverse-mode result in this package."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def relative_error(approx: Array, exact: Array) -> float:
    """Norm-based relative error used by the gradient-check suites."""
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(approx - exact)) / denom
