"""Pathwise Monte-Carlo gradients via forward sensitivity propagation.

The parameter sensitivity runs as extra columns of the same explicit update
that advances the state, so its value at the horizon is the exact derivative
of the discrete integration map evaluated on the realized noise. Averaging
loss-gradient contractions over paths gives an unbiased estimate of the
gradient of the expected loss. A common-random-numbers finite-difference
oracle and an unrolled reverse-mode oracle over the same discretization are
provided for verification.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import backend
from .dynamics import DiffusionSpec, drift_eval, drift_vjp
from .solver import NumericOverflowError
from .streams import BrownianPath, RandomStream, TimeGrid, sample_brownian_increments

__all__ = [
    "AugmentedState",
    "GradientEstimate",
    "integrate_augmented",
    "pathwise_gradient",
    "mc_gradient",
    "fd_gradient_oracle",
    "unrolled_gradient",
    "quadratic_loss",
    "gradcheck_rows",
    "gradcheck_to_csv",
]

# A loss maps final states (R, n) to per-row values (R,) and gradients (R, n).
LossFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class AugmentedState:
    """State plus its sensitivities at one time.

    beta (n, d) is the derivative of the state w.r.t. the drift parameters,
    zero at t=0; alpha (n, n) is the derivative w.r.t. the initial state,
    identity at t=0 and only carried on request.
    """

    h: np.ndarray
    beta: np.ndarray
    alpha: Optional[np.ndarray] = None


@dataclass
class GradientEstimate:
    grad_w: np.ndarray
    n_paths: int
    loss_mean: float
    grad_input: Optional[np.ndarray] = None


def quadratic_loss(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """l(h) = 0.5 * ||h||^2 per row; handy analytic test loss."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    return 0.5 * np.sum(h * h, axis=1), h.copy()


def integrate_augmented(
    h0: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
    drift,
    diffusion: DiffusionSpec,
    want_alpha: bool = False,
) -> AugmentedState:
    """Advance one state jointly with its sensitivities to the horizon.

    Memory is independent of the number of steps: only the current
    (h, beta, alpha) triple is held.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim != 1:
        raise ValueError("h0 must be a single state vector")
    n = h0.shape[0]
    if diffusion.variant != "zero":
        if path is None:
            raise ValueError("non-zero diffusion needs a Brownian path")
        if path.grid != grid or path.dim != n:
            raise ValueError("path does not match grid/state dimensions")
        dW = path.increments[None]
    else:
        dW = None
    h, beta, alpha, overflow = backend.em_aug_batch(
        drift, diffusion, h0[None], dW, grid.n_steps, grid.dt,
        want_beta=True, want_alpha=want_alpha,
    )
    if overflow[0] >= 0:
        raise NumericOverflowError(int(overflow[0]))
    return AugmentedState(
        h=h[0], beta=beta[0], alpha=alpha[0] if want_alpha else None
    )


def pathwise_gradient(
    loss_grad: np.ndarray, augmented: AugmentedState
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Contract a loss gradient with the sensitivities: (grad_w, grad_input)."""
    loss_grad = np.asarray(loss_grad, dtype=np.float64)
    n = augmented.h.shape[0]
    if loss_grad.shape != (n,):
        raise ValueError(f"loss_grad shape {loss_grad.shape} != ({n},)")
    grad_w = loss_grad @ augmented.beta
    grad_input = loss_grad @ augmented.alpha if augmented.alpha is not None else None
    return grad_w, grad_input


def mc_gradient(
    drift,
    diffusion: DiffusionSpec,
    loss_fn: LossFn,
    h0: np.ndarray,
    grid: TimeGrid,
    k_paths: int,
    stream: RandomStream,
    want_input_grad: bool = False,
) -> GradientEstimate:
    """Average pathwise gradient over k_paths fresh paths per sample.

    Row r of the expanded batch (sample b, path j, r = b*k_paths + j) is
    driven by the increments of stream.bump(r), so an oracle holding the same
    stream can rebuild the identical path set (common random numbers).
    """
    if k_paths < 1:
        raise ValueError("k_paths must be >= 1")
    h0 = np.atleast_2d(np.asarray(h0, dtype=np.float64))
    B, n = h0.shape
    rows = np.repeat(h0, k_paths, axis=0)
    if diffusion.variant != "zero":
        dW = sample_brownian_increments(stream, grid, n, B * k_paths)
    else:
        dW = None
    h_T, beta, alpha, overflow = backend.em_aug_batch(
        drift, diffusion, rows, dW, grid.n_steps, grid.dt,
        want_beta=True, want_alpha=want_input_grad,
    )
    bad = np.flatnonzero(overflow >= 0)
    if bad.size:
        r = int(bad[0])
        raise NumericOverflowError(
            int(overflow[r]),
            f"path row {r} (sample {r // k_paths}, path {r % k_paths}) "
            f"overflowed at step {int(overflow[r])}",
        )
    vals, grads = loss_fn(h_T)
    # one contraction per row, then a fixed-order mean over rows
    grad_w = np.einsum("ri,rid->rd", grads, beta).mean(axis=0)
    grad_input = (
        np.einsum("ri,rij->rj", grads, alpha).mean(axis=0)
        if want_input_grad
        else None
    )
    return GradientEstimate(
        grad_w=grad_w,
        n_paths=k_paths,
        loss_mean=float(vals.mean()),
        grad_input=grad_input,
    )


def fd_gradient_oracle(
    drift,
    diffusion: DiffusionSpec,
    loss_fn: LossFn,
    h0_rows: np.ndarray,
    grid: TimeGrid,
    dW: Optional[np.ndarray],
    delta: float,
    coords: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of the path-averaged loss.

    The SAME increment array drives the +delta and -delta integrations
    (common random numbers); without that the difference of two independent
    Monte-Carlo means would bury the O(delta) signal in sampling noise.
    Returns the full gradient, or only the requested coordinates (others 0).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    h0_rows = np.atleast_2d(np.asarray(h0_rows, dtype=np.float64))
    w = drift.params
    out = np.zeros_like(w)
    idx = range(w.size) if coords is None else coords

    def mean_loss(params: np.ndarray) -> float:
        h_T, _, _, overflow = backend.em_batch(
            drift.with_params(params), diffusion, h0_rows, dW,
            grid.n_steps, grid.dt,
        )
        if (overflow >= 0).any():
            raise NumericOverflowError(int(overflow[overflow >= 0].min()))
        vals, _ = loss_fn(h_T)
        return float(vals.mean())

    for c in idx:
        wp = w.copy()
        wp[c] = w[c] + delta
        wm = w.copy()
        wm[c] = w[c] - delta
        out[c] = (mean_loss(wp) - mean_loss(wm)) / (2.0 * delta)
    return out


def unrolled_gradient(
    drift,
    diffusion: DiffusionSpec,
    loss_fn: LossFn,
    h0: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
) -> tuple[float, np.ndarray]:
    """Reverse-mode derivative of the discrete integration map, one path.

    Stores every intermediate state (memory grows with the step count); used
    as an independent oracle against the forward sensitivity, which must
    agree because both differentiate the same discrete update chain.
    Returns (loss value, gradient w.r.t. drift parameters).
    """
    h0 = np.asarray(h0, dtype=np.float64)
    n = h0.shape[0]
    N, dt = grid.n_steps, grid.dt
    if diffusion.variant != "zero":
        if path is None or path.grid != grid or path.dim != n:
            raise ValueError("path does not match grid/state dimensions")
        dW = path.increments
    else:
        dW = None

    states = np.empty((N + 1, n))
    states[0] = h0
    from ._kernels_py import _noise_term, _step_states

    for k in range(N):
        t_k = k * dt
        h = states[k]
        f = drift_eval(drift, h, t_k)
        s = diffusion.sigma_at(t_k)
        db = dW[k] if dW is not None else None
        g_db = _noise_term(diffusion, h, f, s, db) if db is not None else None
        states[k + 1] = _step_states(h, f, g_db, dt)
        if not np.isfinite(states[k + 1]).all():
            raise NumericOverflowError(k)

    vals, grads = loss_fn(states[N][None])
    lam = grads[0]
    grad_w = np.zeros(drift.param_count)
    for k in range(N - 1, -1, -1):
        t_k = k * dt
        h = states[k]
        s = diffusion.sigma_at(t_k)
        db = dW[k] if dW is not None else None
        # cotangent of the drift output inside h_next = h + f dt + g(h,f) db
        if diffusion.variant == "dropout":
            u = (dt + s * db) * lam
        else:
            u = dt * lam
        uJ, uP = drift_vjp(drift, h, t_k, u)
        grad_w += uP[0]
        lam_new = lam + uJ[0]
        if diffusion.variant == "multiplicative":
            lam_new = lam_new + (s * db) * lam
        lam = lam_new
    return float(vals[0]), grad_w


def gradcheck_rows(
    coords: Sequence[int], pathwise: np.ndarray, fd: np.ndarray
) -> list[tuple[int, float, float, float]]:
    """(coordinate, pathwise, fd, rel_err) rows; rel_err on the larger scale."""
    rows = []
    for c in coords:
        p, f = float(pathwise[c]), float(fd[c])
        rel = abs(p - f) / max(abs(p), abs(f), 1e-12)
        rows.append((int(c), p, f, rel))
    return rows


def gradcheck_to_csv(
    rows: Sequence[tuple[int, float, float, float]],
    dest: Union[str, Path, io.TextIOBase],
) -> None:
    lines = ["coordinate,pathwise,fd,rel_err"]
    for c, p, f, rel in rows:
        lines.append(f"{c},{p:.17g},{f:.17g},{rel:.17g}")
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)
