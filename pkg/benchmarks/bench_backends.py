"""Compiled core vs pure-numpy fallback on the hot integration kernels.

Run from the repo root:

    python3 benchmarks/bench_backends.py [--paths 64 256] [--repeats 5]

Times the plain batched integrator and the augmented (state + sensitivity)
integrator on a tanh drift network, identical inputs per backend. The two
backends agree to rounding noise; this script only reports wall time.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nsde import _kernels_py, backend
from nsde.dynamics import DiffusionSpec, DriftNet
from nsde.streams import RandomStream, make_time_grid, sample_brownian_increments


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, nargs="+", default=[64, 256])
    ap.add_argument("--state-dim", type=int, default=16)
    ap.add_argument("--hidden", type=int, default=24)
    ap.add_argument("--n-steps", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if not backend.has_compiled():
        raise SystemExit(
            "compiled core not importable; build it first (pip install -e .)"
        )

    stream = RandomStream(0)
    grid = make_time_grid(1.0, args.n_steps)
    drift = DriftNet.initialize(
        args.state_dim, (args.hidden,), "tanh", stream.substream(0)
    )
    spec = DiffusionSpec("dropout", 1.0)

    print(f"drift: {args.state_dim}-dim state, hidden {args.hidden}, "
          f"{drift.param_count} params, {args.n_steps} steps")
    header = (f"{'kernel':<10} {'paths':>6} {'pure (s)':>10} "
              f"{'compiled (s)':>13} {'speedup':>8}")
    print(header)
    print("-" * len(header))

    # Long-trajectory regime: the twin/trace workload is a tiny batch over
    # many steps, where per-step interpreter overhead dominates the pure path.
    grid_long = make_time_grid(10.0, 10_000)
    h0_two = stream.substream(3).generator().normal(0.0, 1.0, (2, args.state_dim))
    dW_two = sample_brownian_increments(stream.substream(4), grid_long, args.state_dim, 2)
    t_pure = _median_time(
        lambda: _kernels_py.em_batch(drift, spec, h0_two, dW_two, grid_long.n_steps, grid_long.dt),
        args.repeats,
    )
    t_comp = _median_time(
        lambda: backend.em_batch(drift, spec, h0_two, dW_two, grid_long.n_steps, grid_long.dt),
        args.repeats,
    )
    print(f"{'twin 10k':<10} {2:>6} {t_pure:>10.4f} {t_comp:>13.4f} "
          f"{t_pure / t_comp:>8.1f}x")

    for B in args.paths:
        h0 = stream.substream(1).generator().normal(0.0, 1.0, (B, args.state_dim))
        dW = sample_brownian_increments(stream.substream(2), grid, args.state_dim, B)

        for label, call in (
            (
                "em",
                lambda be: be.em_batch(drift, spec, h0, dW, grid.n_steps, grid.dt),
            ),
            (
                "em_aug",
                lambda be: be.em_aug_batch(
                    drift, spec, h0, dW, grid.n_steps, grid.dt,
                    want_beta=True, want_alpha=True,
                ),
            ),
        ):
            t_pure = _median_time(lambda: call(_kernels_py), args.repeats)
            t_comp = _median_time(lambda: call(backend), args.repeats)
            print(f"{label:<10} {B:>6} {t_pure:>10.4f} {t_comp:>13.4f} "
                  f"{t_pure / t_comp:>8.1f}x")


if __name__ == "__main__":
    main()
