"""Pure-Python (numpy) integration kernels.

Fallback implementations of the hot loops, selected by :mod:`nsde.backend`
when the compiled extension is unavailable (or forced via NSDE_BACKEND=pure).
They are vectorized across the batch axis and work for any drift object the
dynamics module can evaluate, not just the MLP the compiled kernels handle.

Update expressions are written in the same operation order as the compiled
kernels so the two backends agree to rounding noise; bit-identical output is
only guaranteed within one backend.

Conventions shared by both backends:
- state batches are (B, n); increment batches are (B, N, n);
- a row whose update produces a non-finite value is frozen at its last finite
  state and its overflow step (the index of the failed step) is reported,
  -1 meaning none;
- with record_every = r > 0 the recorded grid indices are 0, r, 2r, ...
  plus N; record_every = 0 records nothing (final state only).
"""
from __future__ import annotations

import numpy as np

from .dynamics import (
    DiffusionSpec,
    diffusion_eval,
    drift_eval,
    drift_jacobians,
)

__all__ = ["em_batch", "em_aug_batch", "record_indices"]


def record_indices(n_steps: int, record_every: int) -> np.ndarray:
    """Grid indices recorded for a given policy (always includes 0 and N)."""
    if record_every <= 0:
        return np.empty(0, dtype=np.int64)
    idx = np.arange(0, n_steps + 1, record_every, dtype=np.int64)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def _step_states(
    h: np.ndarray, f: np.ndarray, g_db: np.ndarray | None, dt: float
) -> np.ndarray:
    if g_db is None:
        return h + f * dt
    return (h + f * dt) + g_db


def _noise_term(
    spec: DiffusionSpec, h: np.ndarray, f: np.ndarray, s: float, db: np.ndarray
) -> np.ndarray | None:
    if spec.variant == "zero":
        return None
    if spec.variant == "additive":
        return s * db
    if spec.variant == "multiplicative":
        return (s * h) * db
    return (s * f) * db  # dropout


def em_batch(
    drift,
    spec: DiffusionSpec,
    h0: np.ndarray,
    dW: np.ndarray | None,
    n_steps: int,
    dt: float,
    record_every: int = 0,
):
    """Euler-Maruyama over a batch of paths.

    Returns (h_final (B,n), rec (K,B,n) or None, rec_steps (K,) or None,
    overflow_step (B,) int64).
    """
    h = np.array(h0, dtype=np.float64, copy=True)
    if h.ndim != 2:
        raise ValueError(f"h0 must be (B, n), got shape {h.shape}")
    B, n = h.shape
    if spec.variant != "zero":
        if dW is None:
            raise ValueError("non-zero diffusion needs Brownian increments")
        if dW.shape != (B, n_steps, n):
            raise ValueError(f"dW shape {dW.shape} != {(B, n_steps, n)}")
    overflow = np.full(B, -1, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    rec_steps = record_indices(n_steps, record_every)
    rec = None
    rec_pos = 0
    if rec_steps.size:
        rec = np.empty((rec_steps.size, B, n))
        rec[0] = h
        rec_pos = 1
    for k in range(n_steps):
        t_k = k * dt
        # overflow is a detected outcome here, not an anomaly: compute
        # silently and let the finiteness check decide the row's fate
        with np.errstate(over="ignore", invalid="ignore"):
            f = drift_eval(drift, h, t_k)
            s = spec.sigma_at(t_k)
            db = dW[:, k, :] if spec.variant != "zero" else None
            g_db = _noise_term(spec, h, f, s, db) if db is not None else None
            h_next = _step_states(h, f, g_db, dt)
        finite = np.isfinite(h_next).all(axis=1)
        if finite.all():
            if active.all():
                h = h_next
            else:
                h = np.where(active[:, None], h_next, h)
        else:
            newly_bad = active & ~finite
            overflow[newly_bad] = k
            commit = active & finite
            h = np.where(commit[:, None], h_next, h)
            active &= finite
        if rec is not None and rec_pos < rec_steps.size and rec_steps[rec_pos] == k + 1:
            rec[rec_pos] = h
            rec_pos += 1
    return h, rec, (rec_steps if rec is not None else None), overflow


def em_aug_batch(
    drift,
    spec: DiffusionSpec,
    h0: np.ndarray,
    dW: np.ndarray | None,
    n_steps: int,
    dt: float,
    want_beta: bool = True,
    want_alpha: bool = False,
):
    """Joint Euler-Maruyama update of the state and its sensitivities.

    beta (B, n, d) tracks d(state)/d(drift params) from beta_0 = 0; alpha
    (B, n, n) tracks d(state)/d(initial state) from alpha_0 = I. Only the
    current (h, beta, alpha) is held: memory is independent of n_steps.
    Returns (h_final, beta, alpha, overflow_step).
    """
    h = np.array(h0, dtype=np.float64, copy=True)
    B, n = h.shape
    d = drift.param_count
    if spec.variant != "zero" and (dW is None or dW.shape != (B, n_steps, n)):
        raise ValueError("non-zero diffusion needs increments of shape (B, N, n)")
    beta = np.zeros((B, n, d)) if want_beta else None
    alpha = np.broadcast_to(np.eye(n), (B, n, n)).copy() if want_alpha else None
    overflow = np.full(B, -1, dtype=np.int64)
    active = np.ones(B, dtype=bool)
    for k in range(n_steps):
        t_k = k * dt
        # as in em_batch: overflowing rows are detected below, so the
        # arithmetic itself runs with warnings off
        with np.errstate(over="ignore", invalid="ignore"):
            jac = drift_jacobians(drift, h, t_k)
            f, J, P = jac.f, jac.df_dh, jac.df_dw
            s = spec.sigma_at(t_k)
            db = dW[:, k, :] if spec.variant != "zero" else None

            if want_beta:
                m = P + J @ beta
            if want_alpha:
                ma = J @ alpha
            if spec.variant in ("zero", "additive"):
                beta_next = beta + m * dt if want_beta else None
                alpha_next = alpha + ma * dt if want_alpha else None
            elif spec.variant == "multiplicative":
                coef = (s * db)[:, :, None]
                beta_next = (beta + m * dt) + coef * beta if want_beta else None
                alpha_next = (alpha + ma * dt) + coef * alpha if want_alpha else None
            else:  # dropout
                coef = (dt + s * db)[:, :, None]
                beta_next = beta + coef * m if want_beta else None
                alpha_next = alpha + coef * ma if want_alpha else None

            g_db = _noise_term(spec, h, f, s, db) if db is not None else None
            h_next = _step_states(h, f, g_db, dt)

        finite = np.isfinite(h_next).all(axis=1)
        if want_beta:
            finite &= np.isfinite(beta_next).all(axis=(1, 2))
        if want_alpha:
            finite &= np.isfinite(alpha_next).all(axis=(1, 2))
        if finite.all() and active.all():
            h = h_next
            beta, alpha = beta_next, alpha_next
        else:
            newly_bad = active & ~finite
            overflow[newly_bad] = k
            commit = active & finite
            h = np.where(commit[:, None], h_next, h)
            if want_beta:
                beta = np.where(commit[:, None, None], beta_next, beta)
            if want_alpha:
                alpha = np.where(commit[:, None, None], alpha_next, alpha)
            active &= finite
    return h, beta, alpha, overflow
