"""Keyed random streams, uniform time grids, and Brownian increments.

Every other module consumes randomness only through this one. A
:class:`RandomStream` is a value, not a stateful generator: the draws it
produces are a pure function of the key triple ``(seed, stream_id, counter)``,
so results can never depend on call order or thread schedule. Reusing a key
reproduces the draw bit for bit; changing any component of the key gives a
statistically independent sequence.

All floating point is 64-bit.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "RandomStream",
    "TimeGrid",
    "BrownianPath",
    "make_time_grid",
    "sample_brownian_path",
    "sample_brownian_increments",
    "gaussian",
    "bernoulli",
]

_U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class RandomStream:
    """Immutable key addressing one reproducible random source.

    Fields are 64-bit unsigned values. ``stream_id`` conventionally indexes
    paths or samples; ``counter`` is a call cursor advanced by the caller
    (see :meth:`bump`). Keys are hashed through numpy's SeedSequence into a
    counter-based Philox generator, so distinct keys give independent
    sequences and equal keys give bit-identical ones.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream_id", "counter"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            if not 0 <= value <= _U64_MAX:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {value}")
            object.__setattr__(self, name, int(value))

    def substream(self, stream_id: int) -> "RandomStream":
        """Return the stream with a new ``stream_id`` and the counter reset."""
        return RandomStream(self.seed, stream_id, 0)

    def bump(self, k: int = 1) -> "RandomStream":
        """Advance the call cursor by ``k`` without consuming any draws."""
        return replace(self, counter=self.counter + k)

    def generator(self) -> np.random.Generator:
        """Fresh generator keyed by the triple; never cached or shared."""
        key = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, self.counter))
        return np.random.Generator(np.random.Philox(key))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_N = t_end with dt = t_end / N."""

    t_end: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self) -> None:
        if not np.isfinite(self.t_end) or self.t_end <= 0:
            raise ValueError(f"t_end must be finite and positive, got {self.t_end}")
        if not isinstance(self.n_steps, (int, np.integer)) or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if self.t_start != 0.0:
            raise ValueError("t_start is fixed at 0")
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    def time_at(self, k: int) -> float:
        """t_k = k * dt, valid for k = 0..n_steps."""
        return k * self.dt

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1, dtype=np.float64)


def make_time_grid(t_end: float, n_steps: int) -> TimeGrid:
    """Build a uniform grid on [0, t_end] with n_steps Euler steps."""
    return TimeGrid(t_end=t_end, n_steps=n_steps)


@dataclass(frozen=True)
class BrownianPath:
    """Increments of one Brownian path on a grid.

    ``increments[k]`` holds B_{t_{k+1}} - B_{t_k}, each entry i.i.d. Gaussian
    with mean 0 and variance dt. Stored per step (the solver consumes
    increments directly); use :meth:`cumulative` for positions.
    """

    grid: TimeGrid
    increments: np.ndarray  # (n_steps, dim) float64

    def __post_init__(self) -> None:
        inc = np.asarray(self.increments, dtype=np.float64)
        if inc.ndim != 2 or inc.shape[0] != self.grid.n_steps or inc.shape[1] < 1:
            raise ValueError(
                f"increments must have shape (n_steps, dim), got {inc.shape}"
            )
        object.__setattr__(self, "increments", inc)

    @property
    def dim(self) -> int:
        return self.increments.shape[1]

    def cumulative(self) -> np.ndarray:
        """Path positions B_{t_k} for k = 0..N, starting at 0; shape (N+1, dim)."""
        out = np.zeros((self.grid.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def sample_brownian_path(stream: RandomStream, grid: TimeGrid, dim: int) -> BrownianPath:
    """Draw one Brownian path; bit-identical for identical (stream, grid, dim)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    inc = stream.generator().normal(0.0, np.sqrt(grid.dt), size=(grid.n_steps, dim))
    return BrownianPath(grid=grid, increments=inc)


def sample_brownian_increments(
    stream: RandomStream, grid: TimeGrid, dim: int, n_paths: int
) -> np.ndarray:
    """Stacked increments for paths keyed stream.bump(0) .. stream.bump(n_paths-1).

    Returns shape (n_paths, n_steps, dim). Path i is exactly the path
    ``sample_brownian_path(stream.bump(i), grid, dim)`` would return, so
    callers that need path identity (common random numbers) can reconstruct
    any row independently.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    out = np.empty((n_paths, grid.n_steps, dim))
    sd = np.sqrt(grid.dt)
    for i in range(n_paths):
        out[i] = stream.bump(i).generator().normal(0.0, sd, size=(grid.n_steps, dim))
    return out


def gaussian(stream: RandomStream, mean: float, sd: float, shape) -> np.ndarray:
    """Independent Gaussian draws, a pure function of the stream key."""
    if not np.isfinite(sd) or sd < 0:
        raise ValueError(f"sd must be finite and >= 0, got {sd}")
    return stream.generator().normal(mean, sd, size=shape)


def bernoulli(stream: RandomStream, p: float, shape) -> np.ndarray:
    """Independent {0,1} draws with success probability p, as float64."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return (stream.generator().random(size=shape) < p).astype(np.float64)
