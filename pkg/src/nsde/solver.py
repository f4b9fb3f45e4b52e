"""Fixed-step Euler-Maruyama integration with diagonal noise.

Single-path and coupled-twin integration on a shared Brownian path. The time
loop itself lives in the kernel backends; this module owns the public types,
the overflow policy (abort with the step index, never clamp) and trajectory
serialization.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import backend
from .dynamics import DiffusionSpec
from .streams import BrownianPath, TimeGrid, make_time_grid

__all__ = [
    "NumericOverflowError",
    "SolveOptions",
    "Trajectory",
    "em_step",
    "integrate",
    "integrate_coupled",
    "trajectory_to_csv",
    "DEFAULT_CLASSIFICATION_GRID",
    "DEFAULT_STABILITY_GRID",
]

# Defaults used across the package: short horizon for classification dynamics,
# long horizon for exponent estimation.
DEFAULT_CLASSIFICATION_GRID = make_time_grid(1.0, 100)
DEFAULT_STABILITY_GRID = make_time_grid(10.0, 10_000)


class NumericOverflowError(RuntimeError):
    """Integration produced a non-finite state; carries the failing step."""

    def __init__(self, step_index: int, message: str | None = None):
        self.step_index = int(step_index)
        super().__init__(message or f"non-finite state at step {step_index}")


@dataclass(frozen=True)
class SolveOptions:
    """How to integrate and what to keep.

    record='final_only' holds a single state vector for the whole run;
    record='every_k' stores the state every `every` steps (grid indices
    0, k, 2k, ... and always the final index).
    """

    scheme: str = "euler_maruyama"
    record: str = "final_only"
    every: int = 1

    def __post_init__(self) -> None:
        if self.scheme != "euler_maruyama":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record not in ("final_only", "every_k"):
            raise ValueError(f"unknown record policy {self.record!r}")
        if self.record == "every_k" and self.every < 1:
            raise ValueError("every_k needs a positive stride")

    @classmethod
    def every_k(cls, k: int) -> "SolveOptions":
        return cls(record="every_k", every=k)

    @property
    def record_every(self) -> int:
        return self.every if self.record == "every_k" else 0


@dataclass
class Trajectory:
    """Recorded states along one integration; times follow the record policy."""

    times: np.ndarray
    states: np.ndarray  # (K, n)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.times.shape != (self.states.shape[0],):
            raise ValueError("times (K,) must match states (K, n)")
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]


def em_step(
    h: np.ndarray,
    t_k: float,
    dt: float,
    dB_k: Optional[np.ndarray],
    drift,
    diffusion: DiffusionSpec,
    step_index: int = 0,
) -> np.ndarray:
    """One explicit update h + f*dt + g*dB (elementwise) on a single state."""
    from . import _kernels_py
    from .dynamics import drift_eval

    h = np.asarray(h, dtype=np.float64)
    # non-finite results raise below; the arithmetic itself runs silently
    with np.errstate(over="ignore", invalid="ignore"):
        f = drift_eval(drift, h, t_k)
        if diffusion.variant == "zero":
            g_db = None
        else:
            dB_k = np.asarray(dB_k, dtype=np.float64)
            if dB_k.shape != h.shape:
                raise ValueError(f"dB_k shape {dB_k.shape} != state shape {h.shape}")
            s = diffusion.sigma_at(t_k)
            g_db = _kernels_py._noise_term(diffusion, h, f, s, dB_k)
        h_next = _kernels_py._step_states(h, f, g_db, dt)
    if not np.isfinite(h_next).all():
        raise NumericOverflowError(step_index)
    return h_next


def _check_path(
    path: Optional[BrownianPath], grid: TimeGrid, n: int, diffusion: DiffusionSpec
) -> Optional[np.ndarray]:
    if diffusion.variant == "zero":
        return None
    if path is None:
        raise ValueError("non-zero diffusion needs a Brownian path")
    if path.grid != grid:
        raise ValueError("path grid does not match the integration grid")
    if path.dim != n:
        raise ValueError(f"path dim {path.dim} != state dim {n} (diagonal noise)")
    return path.increments


def _batch_to_trajectory(
    grid: TimeGrid,
    opts: SolveOptions,
    h_final: np.ndarray,
    rec: Optional[np.ndarray],
    rec_steps: Optional[np.ndarray],
    row: int,
) -> Trajectory:
    if rec is None:
        return Trajectory(
            times=np.array([grid.t_end]), states=h_final[row][None, :]
        )
    times = rec_steps.astype(np.float64) * grid.dt
    return Trajectory(times=times, states=rec[:, row, :])


def integrate(
    h0: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
    drift,
    diffusion: DiffusionSpec,
    opts: SolveOptions = SolveOptions(),
) -> Trajectory:
    """Integrate one path over the grid; raises NumericOverflowError on blow-up."""
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim != 1:
        raise ValueError("h0 must be a single state vector")
    dW = _check_path(path, grid, h0.shape[0], diffusion)
    dW_b = dW[None] if dW is not None else None
    h_final, rec, rec_steps, overflow = backend.em_batch(
        drift, diffusion, h0[None], dW_b, grid.n_steps, grid.dt,
        record_every=opts.record_every,
    )
    if overflow[0] >= 0:
        raise NumericOverflowError(int(overflow[0]))
    return _batch_to_trajectory(grid, opts, h_final, rec, rec_steps, 0)


def _coupled_kernel(
    h0_a: np.ndarray,
    h0_b: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
    drift,
    diffusion: DiffusionSpec,
    record_every: int,
):
    """Shared-path twin integration as one two-row kernel call.

    Single entry point for every coupled computation in the package: the two
    rows see identical increments and identical per-row arithmetic, so any
    caller deriving differences from this call gets the same bits.
    """
    h0_a = np.asarray(h0_a, dtype=np.float64)
    h0_b = np.asarray(h0_b, dtype=np.float64)
    if h0_a.shape != h0_b.shape or h0_a.ndim != 1:
        raise ValueError("coupled initial states must be two equal-length vectors")
    dW = _check_path(path, grid, h0_a.shape[0], diffusion)
    if dW is not None:
        dW_b = np.ascontiguousarray(np.broadcast_to(dW[None], (2,) + dW.shape))
    else:
        dW_b = None
    return backend.em_batch(
        drift, diffusion, np.stack([h0_a, h0_b]), dW_b, grid.n_steps, grid.dt,
        record_every=record_every,
    )


def integrate_coupled(
    h0_a: np.ndarray,
    h0_b: np.ndarray,
    grid: TimeGrid,
    path: Optional[BrownianPath],
    drift,
    diffusion: DiffusionSpec,
    opts: SolveOptions = SolveOptions(),
) -> tuple[Trajectory, Trajectory]:
    """Advance two initial states with the same Brownian increments.

    Both rows go through one batched kernel call, so the twin trajectories
    are the exact floating-point sequences the single integrations would
    produce, step for step on the shared path.
    """
    h_final, rec, rec_steps, overflow = _coupled_kernel(
        h0_a, h0_b, grid, path, drift, diffusion, opts.record_every
    )
    bad = overflow[overflow >= 0]
    if bad.size:
        raise NumericOverflowError(int(bad.min()))
    traj_a = _batch_to_trajectory(grid, opts, h_final, rec, rec_steps, 0)
    traj_b = _batch_to_trajectory(grid, opts, h_final, rec, rec_steps, 1)
    return traj_a, traj_b


def trajectory_to_csv(traj: Trajectory, dest: Union[str, Path, io.TextIOBase]) -> None:
    """Write `t,h_0,...,h_{n-1}` rows at 17 significant digits."""
    n = traj.state_dim
    header = "t," + ",".join(f"h_{i}" for i in range(n))
    lines = [header]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join(f"{v:.17g}" for v in (t, *row)))
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)
