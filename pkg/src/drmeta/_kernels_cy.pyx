# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels: forward, MSE gradient, Pearlmutter HVP, and the
one-step meta-gradient. Same math and parameter layout as ``_kernels_py``
(per-layer weight block then bias, activation code 0=relu / 1=tanh)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh as c_tanh

cnp.import_array()


cdef void _affine(const double[:, ::1] h, const double[:, ::1] w, const double[::1] b,
                  double[:, ::1] out) noexcept:
    # out = h @ w + b
    cdef Py_ssize_t m = h.shape[0], k = h.shape[1], n = w.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double a
    for i in range(m):
        for j in range(n):
            out[i, j] = b[j]
        for p in range(k):
            a = h[i, p]
            for j in range(n):
                out[i, j] += a * w[p, j]


cdef void _gemm_nn_acc(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept:
    # out += a @ b
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double v
    for i in range(m):
        for p in range(k):
            v = a[i, p]
            for j in range(n):
                out[i, j] += v * b[p, j]


cdef void _gemm_tn(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out,
                   bint accumulate) noexcept:
    # out (+)= a.T @ b   with a (k, m), b (k, n), out (m, n)
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double v
    if not accumulate:
        for i in range(m):
            for j in range(n):
                out[i, j] = 0.0
    for p in range(k):
        for i in range(m):
            v = a[p, i]
            for j in range(n):
                out[i, j] += v * b[p, j]


cdef void _gemm_nt(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out) noexcept:
    # out = a @ b.T   with a (m, k), b (n, k), out (m, n)
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double s
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[j, p]
            out[i, j] = s


cdef void _activate(const double[:, ::1] pre, double[:, ::1] out, int act) noexcept:
    cdef Py_ssize_t m = pre.shape[0], n = pre.shape[1]
    cdef Py_ssize_t i, j
    if act == 1:
        for i in range(m):
            for j in range(n):
                out[i, j] = c_tanh(pre[i, j])
    else:
        for i in range(m):
            for j in range(n):
                out[i, j] = pre[i, j] if pre[i, j] > 0.0 else 0.0


cdef double _residual_scale(const double[:, ::1] out, const double[:, ::1] y, double coef,
                            double[:, ::1] e) noexcept:
    # e = coef * (out - y); returns sum((out - y)^2)
    cdef Py_ssize_t m = out.shape[0], n = out.shape[1]
    cdef Py_ssize_t i, j
    cdef double r, ss = 0.0
    for i in range(m):
        for j in range(n):
            r = out[i, j] - y[i, j]
            ss += r * r
            e[i, j] = coef * r
    return ss


cdef void _mask_actprime(const double[:, ::1] src, const double[:, ::1] pre, const double[:, ::1] h,
                         int act, double[:, ::1] out) noexcept:
    # out = src * act'(pre), with act' expressed through h = act(pre)
    cdef Py_ssize_t m = src.shape[0], n = src.shape[1]
    cdef Py_ssize_t i, j
    cdef double t
    if act == 1:
        for i in range(m):
            for j in range(n):
                t = h[i, j]
                out[i, j] = src[i, j] * (1.0 - t * t)
    else:
        for i in range(m):
            for j in range(n):
                out[i, j] = src[i, j] if pre[i, j] > 0.0 else 0.0


cdef void _rback_combine(const double[:, ::1] rback, const double[:, ::1] back,
                         const double[:, ::1] pre, const double[:, ::1] h,
                         const double[:, ::1] rpre, int act, double[:, ::1] out) noexcept:
    # out = rback * act'(pre) + back * act''(pre) * rpre
    cdef Py_ssize_t m = rback.shape[0], n = rback.shape[1]
    cdef Py_ssize_t i, j
    cdef double t, sp
    if act == 1:
        for i in range(m):
            for j in range(n):
                t = h[i, j]
                sp = 1.0 - t * t
                out[i, j] = rback[i, j] * sp - 2.0 * t * sp * back[i, j] * rpre[i, j]
    else:
        for i in range(m):
            for j in range(n):
                out[i, j] = rback[i, j] if pre[i, j] > 0.0 else 0.0


cdef void _colsum(const double[:, ::1] e, double[::1] out) noexcept:
    cdef Py_ssize_t m = e.shape[0], n = e.shape[1]
    cdef Py_ssize_t i, j
    for j in range(n):
        out[j] = 0.0
    for i in range(m):
        for j in range(n):
            out[j] += e[i, j]


def _views(theta, widths):
    views = []
    cdef Py_ssize_t off = 0, fin, fout
    for i in range(len(widths) - 1):
        fin = widths[i]
        fout = widths[i + 1]
        w = theta[off:off + fin * fout].reshape(fin, fout)
        off += fin * fout
        b = theta[off:off + fout]
        off += fout
        views.append((w, b))
    return views


def mlp_forward(theta, widths, int act, x):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    layers = _views(theta, widths)
    cdef Py_ssize_t last = len(layers) - 1
    h = x
    for i, (w, b) in enumerate(layers):
        pre = np.empty((h.shape[0], w.shape[1]), dtype=np.float64)
        _affine(h, w, b, pre)
        if i == last:
            h = pre
        else:
            nxt = np.empty_like(pre)
            _activate(pre, nxt, act)
            h = nxt
    return h


def _forward_trace(theta, widths, int act, x):
    layers = _views(theta, widths)
    cdef Py_ssize_t last = len(layers) - 1
    h = x
    hs = [x]
    pres = []
    for i, (w, b) in enumerate(layers):
        pre = np.empty((h.shape[0], w.shape[1]), dtype=np.float64)
        _affine(h, w, b, pre)
        pres.append(pre)
        if i == last:
            h = pre
        else:
            nxt = np.empty_like(pre)
            _activate(pre, nxt, act)
            h = nxt
        hs.append(h)
    return layers, hs, pres


def mlp_value_grad(theta, widths, int act, x, y):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    layers, hs, pres = _forward_trace(theta, widths, act, x)
    out = hs[len(hs) - 1]
    cdef double denom = out.size
    e = np.empty_like(out)
    cdef double ss = _residual_scale(out, y, 2.0 / denom, e)

    grad = np.empty_like(theta)
    cdef Py_ssize_t off = theta.size
    cdef Py_ssize_t i, wsize, fout
    for i in range(len(layers) - 1, -1, -1):
        w, b = layers[i]
        fout = w.shape[1]
        wsize = w.size
        off -= fout
        _colsum(e, grad[off:off + fout])
        off -= wsize
        _gemm_tn(hs[i], e, grad[off:off + wsize].reshape(w.shape[0], fout), False)
        if i > 0:
            back = np.empty((e.shape[0], w.shape[0]), dtype=np.float64)
            _gemm_nt(e, w, back)
            e_new = np.empty_like(back)
            _mask_actprime(back, pres[i - 1], hs[i], act, e_new)
            e = e_new
    return ss / denom, grad


def mlp_mse_hvp(theta, widths, int act, x, y, v):
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    layers, hs, pres = _forward_trace(theta, widths, act, x)
    vlayers = _views(v, widths)
    cdef Py_ssize_t n_layers = len(layers)
    cdef Py_ssize_t last = n_layers - 1
    cdef double denom = hs[n_layers].size

    r_hs = [np.zeros_like(hs[0])]
    r_pres = []
    cdef Py_ssize_t i
    for i in range(n_layers):
        w, b = layers[i]
        vw, vb = vlayers[i]
        ra = np.empty((hs[i].shape[0], w.shape[1]), dtype=np.float64)
        _affine(r_hs[i], w, vb, ra)
        _gemm_nn_acc(hs[i], vw, ra)
        r_pres.append(ra)
        if i == last:
            r_hs.append(ra)
        else:
            rh = np.empty_like(ra)
            _mask_actprime(ra, pres[i], hs[i + 1], act, rh)
            r_hs.append(rh)

    e = np.empty_like(hs[n_layers])
    _residual_scale(hs[n_layers], y, 2.0 / denom, e)
    re = (2.0 / denom) * r_hs[n_layers]

    hvp = np.empty_like(theta)
    cdef Py_ssize_t off = theta.size
    cdef Py_ssize_t wsize, fout
    for i in range(n_layers - 1, -1, -1):
        w, b = layers[i]
        vw, vb = vlayers[i]
        fout = w.shape[1]
        wsize = w.size
        off -= fout
        _colsum(re, hvp[off:off + fout])
        off -= wsize
        rdw = hvp[off:off + wsize].reshape(w.shape[0], fout)
        _gemm_tn(r_hs[i], e, rdw, False)
        _gemm_tn(hs[i], re, rdw, True)
        if i > 0:
            back = np.empty((e.shape[0], w.shape[0]), dtype=np.float64)
            _gemm_nt(e, w, back)
            rback = np.empty_like(back)
            _gemm_nt(re, w, rback)
            tmp = np.empty_like(back)
            _gemm_nt(e, vw, tmp)
            rback += tmp
            re_new = np.empty_like(back)
            _rback_combine(rback, back, pres[i - 1], hs[i], r_pres[i - 1], act, re_new)
            e_new = np.empty_like(back)
            _mask_actprime(back, pres[i - 1], hs[i], act, e_new)
            e = e_new
            re = re_new
    return hvp


def mlp_adapt_eval(theta, widths, int act, cx, cy, tx, ty, double lr):
    value, g = mlp_value_grad(theta, widths, act, cx, cy)
    adapted = np.ascontiguousarray(theta, dtype=np.float64) - lr * g
    out = mlp_forward(adapted, widths, act, tx)
    ty = np.ascontiguousarray(ty, dtype=np.float64)
    resid = out - ty
    return adapted, float(np.sum(resid * resid) / resid.size)


def mlp_meta_grad(theta, widths, int act, cx, cy, tx, ty, double lr,
                  bint second_order=True):
    value, gc = mlp_value_grad(theta, widths, act, cx, cy)
    adapted = np.ascontiguousarray(theta, dtype=np.float64) - lr * gc
    outer_value, u = mlp_value_grad(adapted, widths, act, tx, ty)
    if not second_order:
        return u, adapted, outer_value
    hvp = mlp_mse_hvp(theta, widths, act, cx, cy, u)
    return u - lr * hvp, adapted, outer_value


cdef void _axpy(const double[::1] a, const double[::1] b, double c,
                double[::1] out) noexcept:
    # out = a + c * b
    cdef Py_ssize_t i, n = a.shape[0]
    for i in range(n):
        out[i] = a[i] + c * b[i]


cdef void _accumulate(double[::1] acc, const double[::1] g, double w) noexcept:
    cdef Py_ssize_t i, n = acc.shape[0]
    for i in range(n):
        acc[i] += w * g[i]


cdef void _scale_into(const double[:, ::1] src, double c, double[:, ::1] out) noexcept:
    cdef Py_ssize_t i, j
    for i in range(src.shape[0]):
        for j in range(src.shape[1]):
            out[i, j] = c * src[i, j]


cdef void _add_inplace(double[:, ::1] a, const double[:, ::1] b) noexcept:
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            a[i, j] += b[i, j]


cdef double _sse(const double[:, ::1] out, const double[:, ::1] y) noexcept:
    cdef Py_ssize_t i, j
    cdef double r, ss = 0.0
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            r = out[i, j] - y[i, j]
            ss += r * r
    return ss


cdef double _task_forward_sse(list layers, list pre, list h,
                              const double[:, ::1] x, const double[:, ::1] y,
                              int act):
    # forward pass into the preallocated buffers, returns sum of squares
    cdef Py_ssize_t L = len(layers)
    cdef Py_ssize_t l
    for l in range(L):
        w, b = layers[l]
        if l == 0:
            _affine(x, w, b, pre[0])
        else:
            _affine(h[l - 1], w, b, pre[l])
        if l < L - 1:
            _activate(pre[l], h[l], act)
    return _sse(pre[L - 1], y)


cdef double _task_value_grad(list layers, list grad_layers, list pre, list h,
                             list e_buf, list back_buf,
                             const double[:, ::1] x, const double[:, ::1] y,
                             int act):
    # fills pre/h/e_buf/back_buf (reused by the HVP) and the grad views;
    # returns the MSE value
    cdef Py_ssize_t L = len(layers)
    cdef Py_ssize_t l
    cdef double denom, ss
    for l in range(L):
        w, b = layers[l]
        if l == 0:
            _affine(x, w, b, pre[0])
        else:
            _affine(h[l - 1], w, b, pre[l])
        if l < L - 1:
            _activate(pre[l], h[l], act)
    out = pre[L - 1]
    denom = out.size
    ss = _residual_scale(out, y, 2.0 / denom, e_buf[L - 1])
    for l in range(L - 1, -1, -1):
        w, b = layers[l]
        gw, gb = grad_layers[l]
        _colsum(e_buf[l], gb)
        if l == 0:
            _gemm_tn(x, e_buf[l], gw, False)
        else:
            _gemm_tn(h[l - 1], e_buf[l], gw, False)
        if l > 0:
            _gemm_nt(e_buf[l], w, back_buf[l])
            _mask_actprime(back_buf[l], pre[l - 1], h[l - 1], act, e_buf[l - 1])
    return ss / denom


cdef void _task_hvp(list layers, list v_layers, list hvp_layers,
                    list pre, list h, list e_buf, list back_buf,
                    object rh0, list r_pre, list r_h,
                    list re_buf, list rback_buf, list tmp_buf,
                    const double[:, ::1] x, int act):
    # Pearlmutter HVP of the context MSE; reuses the forward trace and the
    # e/back buffers left behind by _task_value_grad on the same data
    cdef Py_ssize_t L = len(layers)
    cdef Py_ssize_t l
    cdef double denom = (<object> pre[L - 1]).size
    for l in range(L):
        w, b = layers[l]
        vw, vb = v_layers[l]
        if l == 0:
            _affine(rh0, w, vb, r_pre[0])
            _gemm_nn_acc(x, vw, r_pre[0])
        else:
            _affine(r_h[l - 1], w, vb, r_pre[l])
            _gemm_nn_acc(h[l - 1], vw, r_pre[l])
        if l < L - 1:
            _mask_actprime(r_pre[l], pre[l], h[l], act, r_h[l])
    _scale_into(r_pre[L - 1], 2.0 / denom, re_buf[L - 1])
    for l in range(L - 1, -1, -1):
        w, b = layers[l]
        vw, vb = v_layers[l]
        rgw, rgb = hvp_layers[l]
        _colsum(re_buf[l], rgb)
        if l == 0:
            _gemm_tn(rh0, e_buf[l], rgw, False)
            _gemm_tn(x, re_buf[l], rgw, True)
        else:
            _gemm_tn(r_h[l - 1], e_buf[l], rgw, False)
            _gemm_tn(h[l - 1], re_buf[l], rgw, True)
        if l > 0:
            _gemm_nt(re_buf[l], w, rback_buf[l])
            _gemm_nt(e_buf[l], vw, tmp_buf[l])
            _add_inplace(rback_buf[l], tmp_buf[l])
            _rback_combine(rback_buf[l], back_buf[l], pre[l - 1], h[l - 1],
                           r_pre[l - 1], act, re_buf[l - 1])
    return


def _batch_buffers(layers, Py_ssize_t n_rows):
    pre = [np.empty((n_rows, w.shape[1]), dtype=np.float64) for w, b in layers]
    act_out = [np.empty((n_rows, w.shape[1]), dtype=np.float64) for w, b in layers]
    e_buf = [np.empty((n_rows, w.shape[1]), dtype=np.float64) for w, b in layers]
    back = [np.empty((n_rows, w.shape[0]), dtype=np.float64) for w, b in layers]
    return pre, act_out, e_buf, back


def mlp_batch_adapt_eval(theta, widths, int act, cx, cy, tx, ty, double lr):
    """Post-adaptation target MSE per task; data stacked as (B, points, dim)."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    cx = np.ascontiguousarray(cx, dtype=np.float64)
    cy = np.ascontiguousarray(cy, dtype=np.float64)
    tx = np.ascontiguousarray(tx, dtype=np.float64)
    ty = np.ascontiguousarray(ty, dtype=np.float64)
    cdef Py_ssize_t B = cx.shape[0]
    cdef Py_ssize_t K = cx.shape[1]
    cdef Py_ssize_t M = tx.shape[1]
    layers = _views(theta, widths)
    grad = np.empty_like(theta)
    grad_layers = _views(grad, widths)
    adapted = np.empty_like(theta)
    adapted_layers = _views(adapted, widths)
    pre_c, h_c, e_c, back_c = _batch_buffers(layers, K)
    pre_t, h_t, _e, _b = _batch_buffers(layers, M)
    losses = np.empty(B, dtype=np.float64)
    cdef const double[:, :, ::1] cx3 = cx, cy3 = cy, tx3 = tx, ty3 = ty
    cdef double[::1] losses_v = losses
    cdef const double[::1] theta_v = theta
    cdef const double[::1] grad_v = grad
    cdef double[::1] adapted_v = adapted
    cdef Py_ssize_t i
    cdef double denom_t = ty3.shape[1] * ty3.shape[2]
    for i in range(B):
        _task_value_grad(layers, grad_layers, pre_c, h_c, e_c, back_c,
                         cx3[i], cy3[i], act)
        _axpy(theta_v, grad_v, -lr, adapted_v)
        losses_v[i] = _task_forward_sse(adapted_layers, pre_t, h_t,
                                        tx3[i], ty3[i], act) / denom_t
    return losses


def mlp_batch_weighted_meta_grad(theta, widths, int act, cx, cy, tx, ty,
                                 double lr, weights, bint second_order=True):
    """Weighted sum of per-task meta-gradients, accumulated in ascending
    task order; zero-weight tasks are skipped."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    cx = np.ascontiguousarray(cx, dtype=np.float64)
    cy = np.ascontiguousarray(cy, dtype=np.float64)
    tx = np.ascontiguousarray(tx, dtype=np.float64)
    ty = np.ascontiguousarray(ty, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t B = cx.shape[0]
    cdef Py_ssize_t K = cx.shape[1]
    cdef Py_ssize_t M = tx.shape[1]
    layers = _views(theta, widths)
    grad_c = np.empty_like(theta)
    grad_c_layers = _views(grad_c, widths)
    adapted = np.empty_like(theta)
    adapted_layers = _views(adapted, widths)
    u = np.empty_like(theta)
    u_layers = _views(u, widths)
    hvp = np.empty_like(theta)
    hvp_layers = _views(hvp, widths)
    meta = np.empty_like(theta)
    gsum = np.zeros_like(theta)
    pre_c, h_c, e_c, back_c = _batch_buffers(layers, K)
    pre_t, h_t, e_t, back_t = _batch_buffers(layers, M)
    _p, r_h, re_buf, _bb = _batch_buffers(layers, K)
    r_pre, _h2, tmp_buf, rback_buf = _batch_buffers(layers, K)
    # rback/tmp need (K, fan_in) shapes: reuse the 'back'-shaped buffers
    rback_buf = [np.empty((K, w.shape[0]), dtype=np.float64) for w, b in layers]
    tmp_buf = [np.empty((K, w.shape[0]), dtype=np.float64) for w, b in layers]
    rh0 = np.zeros((K, cx.shape[2]), dtype=np.float64)
    cdef const double[:, :, ::1] cx3 = cx, cy3 = cy, tx3 = tx, ty3 = ty
    cdef const double[::1] theta_v = theta
    cdef const double[::1] grad_c_v = grad_c
    cdef double[::1] adapted_v = adapted
    cdef const double[::1] u_v = u
    cdef const double[::1] hvp_v = hvp
    cdef double[::1] meta_v = meta
    cdef double[::1] gsum_v = gsum
    cdef const double[::1] w_v = weights
    cdef Py_ssize_t i
    for i in range(B):
        if w_v[i] == 0.0:
            continue
        _task_value_grad(layers, grad_c_layers, pre_c, h_c, e_c, back_c,
                         cx3[i], cy3[i], act)
        _axpy(theta_v, grad_c_v, -lr, adapted_v)
        _task_value_grad(adapted_layers, u_layers, pre_t, h_t, e_t, back_t,
                         tx3[i], ty3[i], act)
        if second_order:
            _task_hvp(layers, u_layers, hvp_layers, pre_c, h_c, e_c, back_c,
                      rh0, r_pre, r_h, re_buf, rback_buf, tmp_buf, cx3[i], act)
            _axpy(u_v, hvp_v, -lr, meta_v)
            _accumulate(gsum_v, meta_v, w_v[i])
        else:
            _accumulate(gsum_v, u_v, w_v[i])
    return gsum
