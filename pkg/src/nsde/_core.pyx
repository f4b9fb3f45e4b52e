# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Euler-Maruyama kernels for MLP drift dynamics.

Hot loops only: plain batched integration and the augmented integration that
carries the parameter/input sensitivities. Semantics (update expression
order, recording policy, overflow freezing) match nsde._kernels_py; see that
module's docstring for the shared conventions.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport isfinite, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef enum:
    VAR_ZERO = 0
    VAR_ADDITIVE = 1
    VAR_MULT = 2
    VAR_DROPOUT = 3

cdef enum:
    ACT_TANH = 0
    ACT_RELU = 1

cdef enum:
    SCHED_CONST = 0
    SCHED_LINEAR = 1


cdef inline double _sigma_at(double sigma, int sched, double t, double t_ref) noexcept nogil:
    if sched == SCHED_LINEAR:
        return sigma * (1.0 - t / t_ref)
    return sigma


cdef void _forward(const double* params, const cnp.int64_t* dims, int n_layers,
                   int act, const double* h, double tf, double* acts) noexcept nogil:
    """Fill per-layer inputs; layer li input starts at offset sum(dims[:li])."""
    cdef Py_ssize_t li, i, j, off_in, off_out, w_off
    cdef Py_ssize_t in_w, out_w
    cdef double z
    cdef Py_ssize_t n = dims[n_layers]  # state width
    for i in range(n):
        acts[i] = h[i]
    acts[n] = tf
    off_in = 0
    w_off = 0
    for li in range(n_layers):
        in_w = dims[li]
        out_w = dims[li + 1]
        off_out = off_in + in_w
        for j in range(out_w):
            z = params[w_off + out_w * in_w + j]  # bias
            for i in range(in_w):
                z += params[w_off + j * in_w + i] * acts[off_in + i]
            if li < n_layers - 1:
                if act == ACT_TANH:
                    acts[off_out + j] = tanh(z)
                else:
                    acts[off_out + j] = z if z > 0.0 else 0.0
            else:
                acts[off_out + j] = z
        w_off += out_w * in_w + out_w
        off_in = off_out


cdef void _jacobians(const double* params, const cnp.int64_t* dims, int n_layers,
                     int act, const double* acts, double* r_cur, double* r_nxt,
                     double* jac, double* pgrad, Py_ssize_t d,
                     bint want_pgrad) noexcept nogil:
    """df/dh into jac (n*n) and df/dparams into pgrad (n*d).

    r_cur/r_nxt are n*max_width scratch rows; acts holds the forward pass.
    With want_pgrad false the pgrad writes are skipped (the buffer is left
    untouched); the backward sweep still runs for jac.
    """
    cdef Py_ssize_t n = dims[n_layers]
    cdef Py_ssize_t li, i, j, k, in_w, out_w, w_off, b_off, a_off, row
    cdef double rij, acc, a_val, der
    # parameter offset of the last layer
    w_off = 0
    for li in range(n_layers):
        w_off += dims[li + 1] * dims[li] + dims[li + 1]
    a_off = 0
    for li in range(n_layers):
        a_off += dims[li]
    # r = df/d(layer output); identity at the last layer is inlined below
    cdef Py_ssize_t w_max = 0
    for li in range(n_layers + 1):
        if dims[li] > w_max:
            w_max = dims[li]
    # re-walk offsets backwards
    for li in range(n_layers - 1, -1, -1):
        in_w = dims[li]
        out_w = dims[li + 1]
        w_off -= out_w * in_w + out_w
        b_off = w_off + out_w * in_w
        a_off -= in_w
        if want_pgrad:
            for i in range(n):
                row = i * d
                for j in range(out_w):
                    rij = r_cur[i * w_max + j] if li < n_layers - 1 else (1.0 if i == j else 0.0)
                    for k in range(in_w):
                        pgrad[row + w_off + j * in_w + k] = rij * acts[a_off + k]
                    pgrad[row + b_off + j] = rij
        if li > 0:
            # propagate through the weights, then the previous activation
            for i in range(n):
                for k in range(in_w):
                    acc = 0.0
                    for j in range(out_w):
                        rij = r_cur[i * w_max + j] if li < n_layers - 1 else (1.0 if i == j else 0.0)
                        acc += rij * params[w_off + j * in_w + k]
                    a_val = acts[a_off + k]
                    if act == ACT_TANH:
                        der = 1.0 - a_val * a_val
                    else:
                        der = 1.0 if a_val > 0.0 else 0.0
                    r_nxt[i * w_max + k] = acc * der
            for i in range(n):
                for k in range(in_w):
                    r_cur[i * w_max + k] = r_nxt[i * w_max + k]
        else:
            for i in range(n):
                for k in range(n):
                    acc = 0.0
                    for j in range(out_w):
                        rij = r_cur[i * w_max + j] if li < n_layers - 1 else (1.0 if i == j else 0.0)
                        acc += rij * params[w_off + j * in_w + k]
                    jac[i * n + k] = acc


def mlp_forward_batch(double[::1] params, cnp.int64_t[::1] dims, int act,
                      double time_scale, double[:, ::1] h, double t):
    """Drift values for a batch; cross-validation surface for the kernels."""
    cdef Py_ssize_t n_layers = dims.shape[0] - 1
    cdef Py_ssize_t n = dims[n_layers]
    cdef Py_ssize_t B = h.shape[0]
    cdef Py_ssize_t total = 0
    cdef Py_ssize_t li, b, i
    for li in range(n_layers + 1):
        total += dims[li]
    acts_arr = np.empty(total, dtype=np.float64)
    out_arr = np.empty((B, n), dtype=np.float64)
    cdef double[::1] acts = acts_arr
    cdef double[:, ::1] out = out_arr
    cdef double tf = t / time_scale
    cdef Py_ssize_t f_off = total - n
    for b in range(B):
        _forward(&params[0], &dims[0], <int>n_layers, act, &h[b, 0], tf, &acts[0])
        for i in range(n):
            out[b, i] = acts[f_off + i]
    return out_arr


def mlp_jacobians_batch(double[::1] params, cnp.int64_t[::1] dims, int act,
                        double time_scale, double[:, ::1] h, double t):
    """(f, df_dh, df_dparams) for a batch; used by backend equivalence tests."""
    cdef Py_ssize_t n_layers = dims.shape[0] - 1
    cdef Py_ssize_t n = dims[n_layers]
    cdef Py_ssize_t B = h.shape[0]
    cdef Py_ssize_t d = params.shape[0]
    cdef Py_ssize_t total = 0, w_max = 0
    cdef Py_ssize_t li, b, i
    for li in range(n_layers + 1):
        total += dims[li]
        if dims[li] > w_max:
            w_max = dims[li]
    acts_arr = np.empty(total, dtype=np.float64)
    f_arr = np.empty((B, n), dtype=np.float64)
    j_arr = np.empty((B, n, n), dtype=np.float64)
    p_arr = np.empty((B, n, d), dtype=np.float64)
    r1_arr = np.empty(n * w_max, dtype=np.float64)
    r2_arr = np.empty(n * w_max, dtype=np.float64)
    cdef double[::1] acts = acts_arr, r1 = r1_arr, r2 = r2_arr
    cdef double[:, ::1] f = f_arr
    cdef double[:, :, ::1] jac = j_arr, pgrad = p_arr
    cdef double tf = t / time_scale
    cdef Py_ssize_t f_off = total - n
    for b in range(B):
        _forward(&params[0], &dims[0], <int>n_layers, act, &h[b, 0], tf, &acts[0])
        for i in range(n):
            f[b, i] = acts[f_off + i]
        _jacobians(&params[0], &dims[0], <int>n_layers, act, &acts[0],
                   &r1[0], &r2[0], &jac[b, 0, 0], &pgrad[b, 0, 0], d, True)
    return f_arr, j_arr, p_arr


def em_batch(double[::1] params, cnp.int64_t[::1] dims, int act, double time_scale,
             double[:, ::1] h0, object dW_obj, Py_ssize_t n_steps, double dt,
             int variant, double sigma, int sched, double sched_t_ref,
             Py_ssize_t record_every):
    """Batched Euler-Maruyama for the MLP drift; see _kernels_py.em_batch."""
    cdef Py_ssize_t n_layers = dims.shape[0] - 1
    cdef Py_ssize_t n = dims[n_layers]
    cdef Py_ssize_t B = h0.shape[0]
    cdef Py_ssize_t total = 0
    cdef Py_ssize_t li
    for li in range(n_layers + 1):
        total += dims[li]
    cdef Py_ssize_t f_off = total - n

    h_arr = np.array(h0, dtype=np.float64, copy=True)
    acts_arr = np.empty(total, dtype=np.float64)
    hnew_arr = np.empty(n, dtype=np.float64)
    over_arr = np.full(B, -1, dtype=np.int64)
    active_arr = np.ones(B, dtype=np.uint8)

    cdef double[:, ::1] h = h_arr
    cdef double[::1] acts = acts_arr, hnew = hnew_arr
    cdef cnp.int64_t[::1] overflow = over_arr
    cdef cnp.uint8_t[::1] active = active_arr

    cdef bint has_noise = variant != VAR_ZERO
    cdef double[:, :, ::1] dW
    if has_noise:
        dW = dW_obj

    rec_arr = None
    rec_steps_arr = None
    cdef double[:, :, ::1] rec
    cdef cnp.int64_t[::1] rec_steps
    cdef Py_ssize_t n_rec = 0, rec_pos = 0
    if record_every > 0:
        idx = np.arange(0, n_steps + 1, record_every, dtype=np.int64)
        if idx[-1] != n_steps:
            idx = np.append(idx, np.int64(n_steps))
        rec_steps_arr = idx
        n_rec = idx.shape[0]
        rec_arr = np.empty((n_rec, B, n), dtype=np.float64)
        rec = rec_arr
        rec_steps = rec_steps_arr
        rec_arr[0] = h_arr
        rec_pos = 1

    cdef Py_ssize_t k, b, i
    cdef double t_k, tf, s, fv, hv
    cdef bint ok
    for k in range(n_steps):
        t_k = k * dt
        tf = t_k / time_scale
        s = _sigma_at(sigma, sched, t_k, sched_t_ref)
        for b in range(B):
            if not active[b]:
                continue
            _forward(&params[0], &dims[0], <int>n_layers, act, &h[b, 0], tf, &acts[0])
            ok = True
            for i in range(n):
                fv = acts[f_off + i]
                hv = h[b, i] + fv * dt
                if variant == VAR_ADDITIVE:
                    hv = hv + s * dW[b, k, i]
                elif variant == VAR_MULT:
                    hv = hv + (s * h[b, i]) * dW[b, k, i]
                elif variant == VAR_DROPOUT:
                    hv = hv + (s * fv) * dW[b, k, i]
                hnew[i] = hv
                if not isfinite(hv):
                    ok = False
            if ok:
                for i in range(n):
                    h[b, i] = hnew[i]
            else:
                overflow[b] = k
                active[b] = 0
        if rec_pos < n_rec and rec_steps[rec_pos] == k + 1:
            for b in range(B):
                for i in range(n):
                    rec[rec_pos, b, i] = h[b, i]
            rec_pos += 1
    return h_arr, rec_arr, rec_steps_arr, over_arr


def em_aug_batch(double[::1] params, cnp.int64_t[::1] dims, int act, double time_scale,
                 double[:, ::1] h0, object dW_obj, Py_ssize_t n_steps, double dt,
                 int variant, double sigma, int sched, double sched_t_ref,
                 bint want_beta, bint want_alpha):
    """Augmented integration (state + sensitivities); see _kernels_py.em_aug_batch."""
    cdef Py_ssize_t n_layers = dims.shape[0] - 1
    cdef Py_ssize_t n = dims[n_layers]
    cdef Py_ssize_t B = h0.shape[0]
    cdef Py_ssize_t d = params.shape[0]
    cdef Py_ssize_t total = 0, w_max = 0
    cdef Py_ssize_t li
    for li in range(n_layers + 1):
        total += dims[li]
        if dims[li] > w_max:
            w_max = dims[li]
    cdef Py_ssize_t f_off = total - n

    h_arr = np.array(h0, dtype=np.float64, copy=True)
    over_arr = np.full(B, -1, dtype=np.int64)
    active_arr = np.ones(B, dtype=np.uint8)
    acts_arr = np.empty(total, dtype=np.float64)
    r1_arr = np.empty(n * w_max, dtype=np.float64)
    r2_arr = np.empty(n * w_max, dtype=np.float64)
    jac_arr = np.empty((n, n), dtype=np.float64)
    p_arr = np.empty((n, d), dtype=np.float64)
    hnew_arr = np.empty(n, dtype=np.float64)

    cdef double[:, ::1] h = h_arr
    cdef cnp.int64_t[::1] overflow = over_arr
    cdef cnp.uint8_t[::1] active = active_arr
    cdef double[::1] acts = acts_arr, r1 = r1_arr, r2 = r2_arr, hnew = hnew_arr
    cdef double[:, ::1] jac = jac_arr, pgrad = p_arr

    cdef bint has_noise = variant != VAR_ZERO
    cdef double[:, :, ::1] dW
    if has_noise:
        dW = dW_obj

    beta_arr = None
    alpha_arr = None
    bnew_arr = None
    ma_arr = None
    anew_arr = None
    cdef double[:, :, ::1] beta, alpha
    cdef double[:, ::1] bnew, ma, anew
    if want_beta:
        beta_arr = np.zeros((B, n, d), dtype=np.float64)
        bnew_arr = np.empty((n, d), dtype=np.float64)
        beta = beta_arr
        bnew = bnew_arr
    if want_alpha:
        alpha_arr = np.empty((B, n, n), dtype=np.float64)
        alpha_arr[:] = np.eye(n)
        ma_arr = np.empty((n, n), dtype=np.float64)
        anew_arr = np.empty((n, n), dtype=np.float64)
        alpha = alpha_arr
        ma = ma_arr
        anew = anew_arr

    # BLAS arguments for the two sensitivity products, written for the
    # column-major convention: a row-major product C = J @ X is computed
    # as C^T = X^T @ J^T on the same memory.
    cdef char transn = b'n'
    cdef int gm_d = <int>d, gm_n = <int>n
    cdef double one = 1.0, zero = 0.0

    cdef Py_ssize_t k, b, i, c
    cdef double t_k, tf, s, fv, hv, coef, db_i
    cdef bint ok
    for k in range(n_steps):
        t_k = k * dt
        tf = t_k / time_scale
        s = _sigma_at(sigma, sched, t_k, sched_t_ref)
        for b in range(B):
            if not active[b]:
                continue
            _forward(&params[0], &dims[0], <int>n_layers, act, &h[b, 0], tf, &acts[0])
            _jacobians(&params[0], &dims[0], <int>n_layers, act, &acts[0],
                       &r1[0], &r2[0], &jac[0, 0], &pgrad[0, 0], d, want_beta)
            ok = True
            if want_beta:
                # pgrad becomes m = df_dw + df_dh @ beta via one accumulate
                dgemm(&transn, &transn, &gm_d, &gm_n, &gm_n, &one,
                      &beta[b, 0, 0], &gm_d, &jac[0, 0], &gm_n,
                      &one, &pgrad[0, 0], &gm_d)
                for i in range(n):
                    if variant == VAR_MULT:
                        db_i = dW[b, k, i]
                        for c in range(d):
                            bnew[i, c] = (beta[b, i, c] + pgrad[i, c] * dt) + (s * db_i) * beta[b, i, c]
                    elif variant == VAR_DROPOUT:
                        coef = dt + s * dW[b, k, i]
                        for c in range(d):
                            bnew[i, c] = beta[b, i, c] + coef * pgrad[i, c]
                    else:
                        for c in range(d):
                            bnew[i, c] = beta[b, i, c] + pgrad[i, c] * dt
                    for c in range(d):
                        if not isfinite(bnew[i, c]):
                            ok = False
            if want_alpha:
                # ma = df_dh @ alpha
                dgemm(&transn, &transn, &gm_n, &gm_n, &gm_n, &one,
                      &alpha[b, 0, 0], &gm_n, &jac[0, 0], &gm_n,
                      &zero, &ma[0, 0], &gm_n)
                for i in range(n):
                    if variant == VAR_MULT:
                        db_i = dW[b, k, i]
                        for c in range(n):
                            anew[i, c] = (alpha[b, i, c] + ma[i, c] * dt) + (s * db_i) * alpha[b, i, c]
                    elif variant == VAR_DROPOUT:
                        coef = dt + s * dW[b, k, i]
                        for c in range(n):
                            anew[i, c] = alpha[b, i, c] + coef * ma[i, c]
                    else:
                        for c in range(n):
                            anew[i, c] = alpha[b, i, c] + ma[i, c] * dt
                    for c in range(n):
                        if not isfinite(anew[i, c]):
                            ok = False
            for i in range(n):
                fv = acts[f_off + i]
                hv = h[b, i] + fv * dt
                if variant == VAR_ADDITIVE:
                    hv = hv + s * dW[b, k, i]
                elif variant == VAR_MULT:
                    hv = hv + (s * h[b, i]) * dW[b, k, i]
                elif variant == VAR_DROPOUT:
                    hv = hv + (s * fv) * dW[b, k, i]
                hnew[i] = hv
                if not isfinite(hv):
                    ok = False
            if ok:
                for i in range(n):
                    h[b, i] = hnew[i]
                if want_beta:
                    for i in range(n):
                        for c in range(d):
                            beta[b, i, c] = bnew[i, c]
                if want_alpha:
                    for i in range(n):
                        for c in range(n):
                            alpha[b, i, c] = anew[i, c]
            else:
                overflow[b] = k
                active[b] = 0
    return h_arr, beta_arr, alpha_arr, over_arr
