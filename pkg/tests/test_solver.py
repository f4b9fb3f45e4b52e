"""Euler-Maruyama stepping, trajectory recording, and coupled twin paths."""
import io
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsde.dynamics import DiffusionSpec, LinearDrift
from nsde.solver import (
    NumericOverflowError,
    SolveOptions,
    Trajectory,
    em_step,
    integrate,
    integrate_coupled,
    trajectory_to_csv,
)
from nsde.streams import RandomStream, make_time_grid, sample_brownian_path

ZERO = DiffusionSpec("zero")
IDENTITY = LinearDrift(np.eye(1))


class TestEmStep:
    def test_explicit_euler_growth(self):
        h = em_step(np.array([1.0]), 0.0, 0.01, None, IDENTITY, ZERO)
        assert h[0] == pytest.approx(1.01, abs=1e-15)

    def test_pure_diffusion_step(self):
        zero_drift = LinearDrift(np.zeros((1, 1)))
        h = em_step(np.array([2.0]), 0.0, 0.01, np.array([0.05]),
                    zero_drift, DiffusionSpec("additive", 1.0))
        assert h[0] == pytest.approx(2.05, abs=1e-15)

    @given(
        h0=st.floats(min_value=-3, max_value=3),
        sigma=st.floats(min_value=0, max_value=3),
        db=st.floats(min_value=-0.3, max_value=0.3),
    )
    @settings(max_examples=50, deadline=None)
    def test_multiplicative_step_closed_form(self, h0, sigma, db):
        # h(1 + dt + sigma*dB): independent scalar expansion of the update.
        dt = 0.01
        got = em_step(np.array([h0]), 0.0, dt, np.array([db]),
                      IDENTITY, DiffusionSpec("multiplicative", sigma))
        assert got[0] == pytest.approx(h0 * (1 + dt + sigma * db), rel=1e-12, abs=1e-12)

    def test_overflow_carries_step_index(self):
        with pytest.raises(NumericOverflowError) as e:
            em_step(np.array([1e308]), 0.0, 1.0, None, LinearDrift(np.eye(1) * 10), ZERO, step_index=7)
        assert e.value.step_index == 7

    def test_increment_shape_checked(self):
        with pytest.raises(ValueError):
            em_step(np.array([1.0, 2.0]), 0.0, 0.01, np.array([0.1]),
                    LinearDrift(np.eye(2)), DiffusionSpec("additive", 1.0))


class TestIntegrate:
    @pytest.mark.parametrize("n_steps", [100, 1000, 10_000])
    def test_euler_converges_to_e(self, n_steps):
        grid = make_time_grid(1.0, n_steps)
        traj = integrate(np.array([1.0]), grid, None, IDENTITY, ZERO)
        assert abs(traj.final[0] - np.e) < 3 * grid.dt

    def test_no_dynamics_constant(self):
        grid = make_time_grid(1.0, 50)
        traj = integrate(np.array([0.7, -0.2]), grid, None,
                         LinearDrift(np.zeros((2, 2))), ZERO, SolveOptions.every_k(1))
        assert np.all(traj.states == np.array([0.7, -0.2]))

    def test_path_reuse_bit_identical(self):
        grid = make_time_grid(1.0, 200)
        path = sample_brownian_path(RandomStream(21, 0), grid, 1)
        spec = DiffusionSpec("multiplicative", 0.8)
        a = integrate(np.array([1.0]), grid, path, IDENTITY, spec)
        b = integrate(np.array([1.0]), grid, path, IDENTITY, spec)
        assert np.array_equal(a.final, b.final)

    def test_zero_variant_ignores_path(self):
        grid = make_time_grid(1.0, 100)
        p1 = sample_brownian_path(RandomStream(22, 0), grid, 1)
        p2 = sample_brownian_path(RandomStream(22, 1), grid, 1)
        a = integrate(np.array([1.0]), grid, p1, IDENTITY, ZERO)
        b = integrate(np.array([1.0]), grid, p2, IDENTITY, ZERO)
        assert np.array_equal(a.final, b.final)

    def test_overflow_reports_step(self):
        # f = 100h doubles every ~150 steps at dt=0.01; must abort, not clamp.
        grid = make_time_grid(100.0, 10_000)
        with pytest.raises(NumericOverflowError) as e:
            integrate(np.array([1.0]), grid, None, LinearDrift(np.eye(1) * 100.0), ZERO)
        assert 0 <= e.value.step_index < grid.n_steps

    def test_record_every_k_times_on_grid(self):
        grid = make_time_grid(1.0, 100)
        traj = integrate(np.array([1.0]), grid, None, IDENTITY, ZERO, SolveOptions.every_k(30))
        # indices 0, 30, 60, 90 and always the final step
        assert np.allclose(traj.times, [0.0, 0.3, 0.6, 0.9, 1.0])

    def test_final_only_returns_single_row(self):
        grid = make_time_grid(1.0, 100)
        traj = integrate(np.array([1.0]), grid, None, IDENTITY, ZERO)
        assert traj.states.shape == (1, 1)
        assert traj.times[0] == 1.0

    def test_final_only_memory_independent_of_n_steps(self):
        # Constant-memory contract: peak allocation must not scale with N.
        drift = LinearDrift(np.eye(2) * 0.1)
        h0 = np.array([1.0, -1.0])

        def peak(n_steps: int) -> int:
            grid = make_time_grid(1.0, n_steps)
            tracemalloc.start()
            integrate(h0, grid, None, drift, ZERO)
            _, p = tracemalloc.get_traced_memory()
            tracemalloc.stop()
            return p

        peak(100)  # warm caches
        assert peak(40_000) < 4 * max(peak(100), 16_384)

    def test_missing_path_rejected_for_noisy_variant(self):
        grid = make_time_grid(1.0, 10)
        with pytest.raises(ValueError):
            integrate(np.array([1.0]), grid, None, IDENTITY, DiffusionSpec("additive", 1.0))

    def test_mismatched_path_grid_rejected(self):
        g1 = make_time_grid(1.0, 10)
        g2 = make_time_grid(1.0, 20)
        path = sample_brownian_path(RandomStream(1), g2, 1)
        with pytest.raises(ValueError):
            integrate(np.array([1.0]), g1, path, IDENTITY, DiffusionSpec("additive", 1.0))


class TestIntegrateCoupled:
    def test_equal_starts_bit_identical(self):
        grid = make_time_grid(1.0, 300)
        path = sample_brownian_path(RandomStream(23, 0), grid, 2)
        drift = LinearDrift(np.array([[0.0, 1.0], [-1.0, 0.0]]))
        spec = DiffusionSpec("multiplicative", 0.5)
        h0 = np.array([1.0, 0.5])
        a, b = integrate_coupled(h0, h0.copy(), grid, path, drift, spec,
                                 SolveOptions.every_k(10))
        assert np.array_equal(a.states, b.states)

    def test_zero_diffusion_difference_is_ode_difference(self):
        grid = make_time_grid(1.0, 500)
        drift = LinearDrift(np.eye(1) * 0.7)
        a, b = integrate_coupled(np.array([1.0]), np.array([1.1]), grid, None, drift, ZERO)
        ia = integrate(np.array([1.0]), grid, None, drift, ZERO)
        ib = integrate(np.array([1.1]), grid, None, drift, ZERO)
        assert np.array_equal(b.final - a.final, ib.final - ia.final)

    def test_twin_rows_match_single_integrations(self):
        # The shared-path kernel must reproduce what two separate solo runs
        # on the same increments would give.
        grid = make_time_grid(1.0, 200)
        path = sample_brownian_path(RandomStream(24, 0), grid, 1)
        spec = DiffusionSpec("multiplicative", 1.0)
        a, b = integrate_coupled(np.array([1.0]), np.array([2.0]), grid, path, IDENTITY, spec)
        sa = integrate(np.array([1.0]), grid, path, IDENTITY, spec)
        sb = integrate(np.array([2.0]), grid, path, IDENTITY, spec)
        assert np.allclose(a.final, sa.final, rtol=1e-13)
        assert np.allclose(b.final, sb.final, rtol=1e-13)


class TestTrajectoryCsv:
    def test_header_and_precision(self):
        traj = Trajectory(times=np.array([0.0, 0.5]),
                          states=np.array([[1.0, 2.0], [1.0 / 3.0, 4.0]]))
        buf = io.StringIO()
        trajectory_to_csv(traj, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "t,h_0,h_1"
        assert len(lines) == 3
        assert "0.33333333333333331" in lines[2]  # 17 significant digits

    def test_file_round_trip(self, tmp_path):
        traj = Trajectory(times=np.array([0.0, 1.0]), states=np.array([[0.1], [0.2]]))
        dest = tmp_path / "traj.csv"
        trajectory_to_csv(traj, dest)
        body = np.loadtxt(dest, delimiter=",", skiprows=1)
        assert np.array_equal(body, np.array([[0.0, 0.1], [1.0, 0.2]]))

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            Trajectory(times=np.array([0.0, 0.0]), states=np.zeros((2, 1)))


class TestSolveOptions:
    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            SolveOptions(scheme="milstein")

    def test_every_k_stride_positive(self):
        with pytest.raises(ValueError):
            SolveOptions.every_k(0)
