"""Pure-numpy twin of the compiled MLP kernels.

Same math and parameter layout as ``_kernels_cy``: per-layer weight matrix
(fan_in, fan_out) followed by its bias, concatenated in order. The loss is
the mean squared error over all output entries; the second-order term of
the one-step meta-gradient comes from a Pearlmutter Hessian-vector product
through the context loss.

Activation codes: 0 = relu (subgradient 0 at the kink), 1 = tanh.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def _layer_views(theta: Array, widths) -> list[tuple[Array, Array]]:
    out = []
    off = 0
    for i in range(len(widths) - 1):
        fin, fout = widths[i], widths[i + 1]
        w = theta[off : off + fin * fout].reshape(fin, fout)
        off += fin * fout
        b = theta[off : off + fout]
        off += fout
        out.append((w, b))
    return out


def _act(a: Array, act: int) -> Array:
    return np.tanh(a) if act == 1 else np.maximum(a, 0.0)


def _act_prime(a: Array, h: Array, act: int) -> Array:
    # h is the activation output for the same preactivation a
    return 1.0 - h * h if act == 1 else (a > 0.0).astype(np.float64)


def mlp_forward(theta: Array, widths, act: int, x: Array) -> Array:
    layers = _layer_views(theta, widths)
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = h @ w + b
        h = a if i == last else _act(a, act)
    return h


def _forward_trace(theta, widths, act, x):
    layers = _layer_views(theta, widths)
    hs = [x]
    pres = []
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        a = hs[-1] @ w + b
        pres.append(a)
        hs.append(a if i == last else _act(a, act))
    return layers, hs, pres


def mlp_value_grad(theta: Array, widths, act: int, x: Array, y: Array):
    """MSE value and its gradient w.r.t. the flat parameters."""
    layers, hs, pres = _forward_trace(theta, widths, act, x)
    out = hs[-1]
    resid = out - y
    denom = float(resid.size)
    value = float(np.sum(resid * resid) / denom)

    grad = np.empty_like(theta)
    e = (2.0 / denom) * resid
    off = theta.size
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        fout = w.shape[1]
        db = e.sum(axis=0)
        dw = hs[i].T @ e
        off -= fout
        grad[off : off + fout] = db
        off -= w.size
        grad[off : off + w.size] = dw.ravel()
        if i > 0:
            e = (e @ w.T) * _act_prime(pres[i - 1], hs[i], act)
    return value, grad


def mlp_mse_hvp(theta: Array, widths, act: int, x: Array, y: Array, v: Array) -> Array:
    """Hessian-vector product of the MSE loss at theta in direction v."""
    layers, hs, pres = _forward_trace(theta, widths, act, x)
    vlayers = _layer_views(v, widths)
    n_layers = len(layers)
    last = n_layers - 1
    denom = float(hs[-1].size)

    # R-forward pass: directional derivatives of activations
    r_hs = [np.zeros_like(hs[0])]
    r_pres = []
    for i, ((w, _), (vw, vb)) in enumerate(zip(layers, vlayers)):
        ra = r_hs[-1] @ w + hs[i] @ vw + vb
        r_pres.append(ra)
        if i == last:
            r_hs.append(ra)
        else:
            r_hs.append(_act_prime(pres[i], hs[i + 1], act) * ra)

    # backward + R-backward passes
    e = (2.0 / denom) * (hs[-1] - y)
    re = (2.0 / denom) * r_hs[-1]
    hvp = np.empty_like(theta)
    off = theta.size
    for i in range(n_layers - 1, -1, -1):
        w, _ = layers[i]
        vw, _ = vlayers[i]
        fout = w.shape[1]
        rdb = re.sum(axis=0)
        rdw = r_hs[i].T @ e + hs[i].T @ re
        off -= fout
        hvp[off : off + fout] = rdb
        off -= w.size
        hvp[off : off + w.size] = rdw.ravel()
        if i > 0:
            sp = _act_prime(pres[i - 1], hs[i], act)
            back = e @ w.T
            rback = re @ w.T + e @ vw.T
            if act == 1:
                t = hs[i]
                spp = -2.0 * t * (1.0 - t * t)
                re = rback * sp + back * spp * r_pres[i - 1]
            else:
                re = rback * sp
            e = back * sp
    return hvp


def mlp_adapt_eval(theta, widths, act, cx, cy, tx, ty, lr):
    """One inner gradient step on the context set, then the target MSE."""
    _, g = mlp_value_grad(theta, widths, act, cx, cy)
    adapted = theta - lr * g
    out = mlp_forward(adapted, widths, act, tx)
    resid = out - ty
    return adapted, float(np.sum(resid * resid) / resid.size)


def mlp_meta_grad(theta, widths, act, cx, cy, tx, ty, lr, second_order=True):
    """Gradient of the post-adaptation target MSE w.r.t. the initial
    parameters. Exact mode adds the -lr * H_context @ u term."""
    _, gc = mlp_value_grad(theta, widths, act, cx, cy)
    adapted = theta - lr * gc
    outer_value, u = mlp_value_grad(adapted, widths, act, tx, ty)
    if not second_order:
        return u, adapted, outer_value
    hvp = mlp_mse_hvp(theta, widths, act, cx, cy, u)
    return u - lr * hvp, adapted, outer_value


def mlp_batch_adapt_eval(theta, widths, act, cx, cy, tx, ty, lr):
    """Post-adaptation target MSE per task; data stacked as (B, points, dim)."""
    losses = np.empty(cx.shape[0])
    for i in range(cx.shape[0]):
        _, losses[i] = mlp_adapt_eval(theta, widths, act, cx[i], cy[i], tx[i], ty[i], lr)
    return losses


def mlp_batch_weighted_meta_grad(theta, widths, act, cx, cy, tx, ty, lr, weights,
                                 second_order=True):
    """Weighted sum of per-task meta-gradients, accumulated in ascending
    task order; zero-weight tasks are skipped."""
    gsum = np.zeros_like(theta)
    for i in np.flatnonzero(np.asarray(weights) != 0.0):
        g, _, _ = mlp_meta_grad(
            theta, widths, act, cx[i], cy[i], tx[i], ty[i], lr, second_order
        )
        gsum += weights[i] * g
    return gsum
