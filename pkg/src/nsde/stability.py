"""Perturbation growth, Lyapunov exponents and noise-induced stability.

Tools to measure how a small state perturbation evolves when the original
and the perturbed trajectory share one Brownian path, to estimate the
almost-sure exponential rate from path ensembles, and to compare it against
the moment-function certificate bound (which is tight for linear drift with
state-proportional noise).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import backend
from .dynamics import (
    DiffusionSpec,
    DriftNet,
    LinearDrift,
    lipschitz_estimate,
)
from .solver import Trajectory, _coupled_kernel
from .streams import (
    BrownianPath,
    RandomStream,
    TimeGrid,
    sample_brownian_increments,
)

__all__ = [
    "PerturbationTrace",
    "LyapunovEstimate",
    "StabilityCertificate",
    "perturbation_trace",
    "lyapunov_exponent",
    "gbm_closed_form",
    "corollary_bound",
    "stability_sweep",
    "sweep_to_csv",
    "exponent_zero_crossing",
]


@dataclass
class PerturbationTrace:
    """Norm of the twin-trajectory difference at each recorded time.

    overflow_step >= 0 marks the step where either twin left the finite
    range; the trace is truncated to the steps before it.
    """

    times: np.ndarray
    eps_norms: np.ndarray
    log_norms: np.ndarray
    overflow_step: int = -1

    @property
    def overflowed(self) -> bool:
        return self.overflow_step >= 0


@dataclass
class LyapunovEstimate:
    """Least-squares slope of the path-mean log perturbation norm.

    stderr is the standard error of the mean of per-path slopes over the
    same fit window. overflow_fraction counts paths that left the finite
    range before the horizon; an all-overflowed ensemble reports +inf.
    """

    lambda_hat: float
    stderr: float
    fit_window: tuple[float, float]
    n_paths: int
    overflow_fraction: float = 0.0


@dataclass(frozen=True)
class StabilityCertificate:
    """Exponential-decay certificate from moment-function constants.

    decay rate bound = -(c3 - 2*c2)/(2*p); the perturbation norm decays
    almost surely when c3 exceeds 2*c2 strictly.
    """

    p: float
    c1: float
    c2: float
    c3: float

    @property
    def bound(self) -> float:
        return -(self.c3 - 2.0 * self.c2) / (2.0 * self.p)

    @property
    def stable(self) -> bool:
        return self.c3 > 2.0 * self.c2


def perturbation_trace(
    drift,
    diffusion: DiffusionSpec,
    h0: np.ndarray,
    eps0: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
    record_every: int = 1,
) -> PerturbationTrace:
    """Evolve a perturbation on a shared Brownian path.

    The perturbed twin starts at h0 + eps0 and both twins advance through
    one two-row kernel call; the reported perturbation is the exact
    floating-point difference of the twins at each recorded step. (Updating
    the difference by its own recursion would not reproduce those bits:
    subtraction does not distribute over the rounded updates.) Overflow is
    data here, not an error: the trace stops at the last finite step.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    eps0 = np.asarray(eps0, dtype=np.float64)
    if eps0.shape != h0.shape:
        raise ValueError("eps0 must match the state shape")
    h_final, rec, rec_steps, overflow = _coupled_kernel(
        h0, h0 + eps0, grid, path, drift, diffusion, record_every
    )
    if rec is None:  # record_every=0: final state only
        rec = h_final[None]
        rec_steps = np.array([grid.n_steps], dtype=np.int64)
    bad = overflow[overflow >= 0]
    over_step = int(bad.min()) if bad.size else -1
    if over_step >= 0:
        keep = rec_steps <= over_step
        rec, rec_steps = rec[keep], rec_steps[keep]
    eps = rec[:, 1, :] - rec[:, 0, :]
    norms = _safe_l2(eps)
    with np.errstate(divide="ignore"):
        logs = np.log(norms)
    return PerturbationTrace(
        times=rec_steps.astype(np.float64) * grid.dt,
        eps_norms=norms,
        log_norms=logs,
        overflow_step=over_step,
    )


def _safe_l2(x: np.ndarray) -> np.ndarray:
    """l2 norm along the last axis without squaring overflow.

    Plain sqrt-of-sum-of-squares already overflows near 1e154, half the
    exponent range; perturbations in unstable regimes legitimately reach
    1e300 while still being finite data. Scales by the max magnitude first.
    """
    m = np.max(np.abs(x), axis=-1)
    scale = np.where(m > 0, m, 1.0)
    scaled = x / scale[..., None]
    return m * np.sqrt(np.sum(scaled * scaled, axis=-1))


def _fit_slope(times: np.ndarray, values: np.ndarray) -> float:
    """Least-squares slope of values against times."""
    return float(np.polyfit(times, values, 1)[0])


def lyapunov_exponent(
    drift,
    diffusion: DiffusionSpec,
    h0: np.ndarray,
    eps0: np.ndarray,
    grid: TimeGrid,
    n_paths: int,
    stream: RandomStream,
    fit_window: Optional[tuple[float, float]] = None,
) -> LyapunovEstimate:
    """Estimate the almost-sure exponential rate of the perturbation norm.

    Path i of the ensemble is driven by stream.bump(i). The rate is the
    least-squares slope of the path-mean log norm over the fit window
    (default [0.2*T, T], skipping the early transient); the mean of logs,
    not the log of means, is what the almost-sure statement controls.
    Paths that overflow before the window ends are dropped from the fit and
    counted in overflow_fraction; if every path overflows the estimate is
    +inf.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    eps0 = np.asarray(eps0, dtype=np.float64)
    if not np.linalg.norm(eps0) > 0:
        raise ValueError("eps0 must be non-zero to define a growth rate")
    if n_paths < 2:
        raise ValueError("need at least 2 paths for a slope standard error")
    window = fit_window or (0.2 * grid.t_end, grid.t_end)
    t_lo, t_hi = window
    if not (0.0 < t_lo < t_hi <= grid.t_end):
        raise ValueError(f"fit window {window} must sit inside (0, T]")

    n = h0.shape[0]
    # pairs interleaved: rows 2i (base) and 2i+1 (perturbed) share path i
    starts = np.empty((2 * n_paths, n))
    starts[0::2] = h0
    starts[1::2] = h0 + eps0
    if diffusion.variant != "zero":
        dw = sample_brownian_increments(stream, grid, n, n_paths)
        dW = np.repeat(dw, 2, axis=0)
    else:
        dW = None
    rec: np.ndarray
    _, rec, rec_steps, overflow = backend.em_batch(
        drift, diffusion, starts, dW, grid.n_steps, grid.dt, record_every=1
    )
    pair_over = np.full(n_paths, -1, dtype=np.int64)
    for i in range(n_paths):
        cand = overflow[2 * i : 2 * i + 2]
        cand = cand[cand >= 0]
        if cand.size:
            pair_over[i] = cand.min()

    times = rec_steps.astype(np.float64) * grid.dt
    in_window = (times >= t_lo) & (times <= t_hi)
    eps = rec[:, 1::2, :] - rec[:, 0::2, :]  # (K, n_paths, n)
    with np.errstate(divide="ignore"):
        log_norms = np.log(_safe_l2(eps))  # (K, n_paths)

    # a path participates if it stays finite through the fit window
    last_needed = int(rec_steps[np.flatnonzero(in_window)[-1]])
    ok = (pair_over < 0) | (pair_over > last_needed)
    overflow_fraction = float(np.mean(~ok))
    if not ok.any():
        return LyapunovEstimate(
            lambda_hat=math.inf,
            stderr=math.nan,
            fit_window=window,
            n_paths=n_paths,
            overflow_fraction=1.0,
        )
    t_fit = times[in_window]
    curves = log_norms[np.ix_(in_window, ok)]
    lam = _fit_slope(t_fit, curves.mean(axis=1))
    slopes = np.array([_fit_slope(t_fit, curves[:, j]) for j in range(curves.shape[1])])
    stderr = float(slopes.std(ddof=1) / np.sqrt(slopes.size))
    return LyapunovEstimate(
        lambda_hat=lam,
        stderr=stderr,
        fit_window=window,
        n_paths=n_paths,
        overflow_fraction=overflow_fraction,
    )


def gbm_closed_form(
    x0: float, a: float, sigma: float, grid: TimeGrid, path: Optional[BrownianPath]
) -> Trajectory:
    """Exact solution of dx = a*x dt + sigma*x dB on the grid (Ito form).

    x_t = x0 * exp((a - sigma^2/2) t + sigma B_t), with B taken from the
    path's cumulative sums; sigma=0 needs no path.
    """
    times = grid.times()
    if sigma == 0.0 or path is None:
        if sigma != 0.0:
            raise ValueError("sigma != 0 needs a Brownian path")
        b = np.zeros_like(times)
    else:
        if path.grid != grid or path.dim != 1:
            raise ValueError("need a scalar path on the same grid")
        b = path.cumulative()[:, 0]
    x = x0 * np.exp((a - 0.5 * sigma * sigma) * times + sigma * b)
    return Trajectory(times=times, states=x[:, None])


def corollary_bound(L: float, sigma: float) -> StabilityCertificate:
    """Certificate for Lipschitz-L drift with state-proportional noise.

    Squared-norm moment function: p=2, c1=1, c2=2L+sigma^2, c3=4 sigma^2,
    so the rate bound is -(sigma^2/2 - L), stable iff sigma^2 > 2L.
    """
    if L < 0 or sigma < 0:
        raise ValueError("L and sigma must be non-negative")
    s2 = sigma * sigma
    return StabilityCertificate(p=2.0, c1=1.0, c2=2.0 * L + s2, c3=4.0 * s2)


@dataclass
class SweepRow:
    sigma: float
    lambda_hat: float
    stderr: float
    bound: float
    stable: bool
    overflow_fraction: float


def _default_lipschitz(drift, stream: RandomStream) -> float:
    if isinstance(drift, LinearDrift):
        return float(np.linalg.norm(drift.matrix, 2))
    if isinstance(drift, DriftNet):
        probes = stream.generator().normal(size=(64, drift.state_dim))
        return lipschitz_estimate(drift, probes)
    raise TypeError("pass lipschitz= explicitly for this drift type")


def stability_sweep(
    drift,
    sigma_list: Sequence[float],
    h0: np.ndarray,
    eps0: np.ndarray,
    grid: TimeGrid,
    n_paths: int,
    stream: RandomStream,
    variant: str = "multiplicative",
    lipschitz: Optional[float] = None,
    fit_window: Optional[tuple[float, float]] = None,
) -> list[SweepRow]:
    """Empirical exponent next to the certificate bound for each noise level.

    Cell i uses stream.substream(i); an overflowing cell is recorded, not
    fatal. The certificate uses the drift's Lipschitz constant (exact
    operator norm for a linear drift, power-iteration estimate for a
    network) unless one is supplied.
    """
    L = _default_lipschitz(drift, stream.substream(10_000)) if lipschitz is None else lipschitz
    rows = []
    for i, sigma in enumerate(sigma_list):
        spec = DiffusionSpec(variant, sigma=float(sigma)) if sigma != 0 else DiffusionSpec("zero")
        est = lyapunov_exponent(
            drift, spec, h0, eps0, grid, n_paths, stream.substream(i), fit_window
        )
        cert = corollary_bound(L, float(sigma))
        rows.append(
            SweepRow(
                sigma=float(sigma),
                lambda_hat=est.lambda_hat,
                stderr=est.stderr,
                bound=cert.bound,
                stable=cert.stable,
                overflow_fraction=est.overflow_fraction,
            )
        )
    return rows


def sweep_to_csv(rows: Sequence[SweepRow], dest: Union[str, Path, io.TextIOBase]) -> None:
    lines = ["sigma,lambda_hat,stderr,bound,stable,overflow_fraction"]
    for r in rows:
        lines.append(
            f"{r.sigma:.17g},{r.lambda_hat:.17g},{r.stderr:.17g},"
            f"{r.bound:.17g},{str(r.stable).lower()},{r.overflow_fraction:.17g}"
        )
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)


def exponent_zero_crossing(rows: Sequence[SweepRow]) -> Optional[float]:
    """Noise level where the measured exponent changes sign.

    Linear interpolation between the first adjacent pair of sigma values
    whose exponents bracket zero; None if the sweep never crosses.
    """
    pts = sorted((r.sigma, r.lambda_hat) for r in rows if math.isfinite(r.lambda_hat))
    for (s0, l0), (s1, l1) in zip(pts, pts[1:]):
        if l0 == 0.0:
            return s0
        if l0 > 0.0 > l1 or l0 < 0.0 < l1:
            return s0 + (s1 - s0) * (0.0 - l0) / (l1 - l0)
    if pts and pts[-1][1] == 0.0:
        return pts[-1][0]
    return None
