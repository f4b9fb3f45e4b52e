"""Perturbation evolution, exponent estimation, and the decay certificate.

The scalar system dx = a*x dt + sigma*x dB has the exact solution
x0*exp((a - sigma^2/2) t + sigma B_t), which supplies the oracle for every
tolerance here: the exponent of the twin difference is a - sigma^2/2, and
the certificate bound -(sigma^2/2 - L) attains it at L = a.
"""
import io

import numpy as np
import pytest

from nsde.dynamics import DiffusionSpec, DriftNet, LinearDrift
from nsde.stability import (
    SweepRow,
    corollary_bound,
    exponent_zero_crossing,
    gbm_closed_form,
    lyapunov_exponent,
    perturbation_trace,
    stability_sweep,
    sweep_to_csv,
)
from nsde.streams import RandomStream, make_time_grid, sample_brownian_path

SCALAR = LinearDrift(np.eye(1))


class TestPerturbationTrace:
    @pytest.mark.parametrize(
        "spec",
        [
            DiffusionSpec("zero"),
            DiffusionSpec("additive", 0.8),
            DiffusionSpec("multiplicative", 0.8),
            DiffusionSpec("dropout", 0.8),
        ],
        ids=lambda s: s.variant,
    )
    def test_zero_start_stays_zero_bitwise(self, spec):
        grid = make_time_grid(1.0, 500)
        path = sample_brownian_path(RandomStream(80), grid, 2)
        net = DriftNet.initialize(2, (5,), "tanh", RandomStream(81))
        tr = perturbation_trace(net, spec, np.array([0.4, -0.2]), np.zeros(2), grid, path)
        assert np.all(tr.eps_norms == 0.0)

    def test_ode_growth_matches_exponential(self):
        grid = make_time_grid(2.0, 2000)
        tr = perturbation_trace(SCALAR, DiffusionSpec("zero"),
                                np.array([1.0]), np.array([1e-6]), grid, None)
        expected = 1e-6 * np.exp(tr.times)
        assert np.allclose(tr.eps_norms, expected, rtol=3 * grid.dt)

    def test_state_noise_keeps_perturbation_alive(self):
        # With state-proportional noise a non-zero perturbation can shrink
        # but not hit zero in finite time.
        grid = make_time_grid(10.0, 10_000)
        spec = DiffusionSpec("multiplicative", 2.0)
        for i in range(8):
            path = sample_brownian_path(RandomStream(82, i), grid, 1)
            tr = perturbation_trace(SCALAR, spec, np.array([1.0]), np.array([1e-3]),
                                    grid, path)
            assert not tr.overflowed
            assert tr.eps_norms.min() > 0.0

    def test_difference_recursion_identity(self):
        # Advancing eps by its own coupled update reproduces the twin
        # difference exactly: both sides are the same floating-point
        # subtraction of identically-computed states.
        from nsde.solver import integrate_coupled, SolveOptions

        grid = make_time_grid(1.0, 300)
        for trial, (variant, sigma) in enumerate(
            [("zero", 0.0), ("additive", 0.6), ("multiplicative", 0.6), ("dropout", 0.6)]
        ):
            spec = DiffusionSpec(variant, sigma)
            net = DriftNet.initialize(3, (4,), "tanh", RandomStream(83, trial))
            h0 = RandomStream(84, trial).generator().normal(0.0, 0.5, 3)
            eps0 = 1e-4 * RandomStream(85, trial).generator().normal(size=3)
            path = sample_brownian_path(RandomStream(86, trial), grid, 3)
            a, b = integrate_coupled(h0, h0 + eps0, grid, path, net, spec,
                                     SolveOptions.every_k(1))
            tr = perturbation_trace(net, spec, h0, eps0, grid, path)
            diff = np.linalg.norm(b.states - a.states, axis=1)
            # the twin states are bit-identical across the two calls; the
            # norms differ only by the overflow-safe scaling inside the trace
            assert np.allclose(tr.eps_norms, diff, rtol=1e-14, atol=0.0), variant

    def test_overflow_truncates_trace(self):
        grid = make_time_grid(200.0, 2000)
        tr = perturbation_trace(LinearDrift(np.eye(1) * 10.0), DiffusionSpec("zero"),
                                np.array([1.0]), np.array([0.5]), grid, None)
        assert tr.overflowed
        assert tr.times[-1] <= tr.overflow_step * grid.dt
        assert np.all(np.isfinite(tr.eps_norms))


class TestLyapunovExponent:
    def test_unit_drift_rate(self):
        grid = make_time_grid(10.0, 10_000)
        est = lyapunov_exponent(SCALAR, DiffusionSpec("zero"), np.array([1.0]),
                                np.array([1e-6]), grid, 4, RandomStream(87))
        assert est.lambda_hat == pytest.approx(1.0, abs=0.02)

    def test_strong_noise_flips_sign(self):
        grid = make_time_grid(10.0, 10_000)
        est = lyapunov_exponent(SCALAR, DiffusionSpec("multiplicative", 2.8),
                                np.array([1.0]), np.array([1e-3]), grid, 64,
                                RandomStream(88))
        assert est.lambda_hat == pytest.approx(1.0 - 2.8**2 / 2, abs=0.15)

    def test_state_independent_noise_neutral(self):
        # Additive noise cancels in the twin difference, so the rate matches
        # the noise-free rate to within its own standard error.
        grid = make_time_grid(10.0, 5000)
        drift = LinearDrift(np.eye(1) * -0.5)
        base = lyapunov_exponent(drift, DiffusionSpec("zero"), np.array([1.0]),
                                 np.array([1e-4]), grid, 4, RandomStream(89))
        noisy = lyapunov_exponent(drift, DiffusionSpec("additive", 1.0), np.array([1.0]),
                                  np.array([1e-4]), grid, 16, RandomStream(90))
        assert abs(noisy.lambda_hat - base.lambda_hat) <= max(3 * noisy.stderr, 1e-6)

    def test_all_paths_overflowed_reports_inf(self):
        grid = make_time_grid(200.0, 2000)
        est = lyapunov_exponent(LinearDrift(np.eye(1) * 10.0), DiffusionSpec("zero"),
                                np.array([1.0]), np.array([0.5]), grid, 2, RandomStream(91))
        assert est.lambda_hat == np.inf
        assert est.overflow_fraction == 1.0

    def test_zero_perturbation_rejected(self):
        with pytest.raises(ValueError):
            lyapunov_exponent(SCALAR, DiffusionSpec("zero"), np.array([1.0]),
                              np.array([0.0]), make_time_grid(1.0, 100), 4, RandomStream(1))

    def test_fit_window_validated(self):
        with pytest.raises(ValueError):
            lyapunov_exponent(SCALAR, DiffusionSpec("zero"), np.array([1.0]),
                              np.array([1e-6]), make_time_grid(1.0, 100), 4,
                              RandomStream(1), fit_window=(0.5, 2.0))


class TestClosedForm:
    def test_noise_free_exponential(self):
        grid = make_time_grid(2.0, 100)
        traj = gbm_closed_form(1.5, 1.0, 0.0, grid, None)
        assert np.allclose(traj.states[:, 0], 1.5 * np.exp(grid.times()), rtol=1e-14)

    def test_frozen_path_exposes_drift_correction(self):
        # On the all-zeros path only the -sigma^2/2 exponent survives.
        grid = make_time_grid(1.0, 10)
        flat = sample_brownian_path(RandomStream(92), grid, 1)
        flat = type(flat)(grid=grid, increments=np.zeros_like(flat.increments))
        traj = gbm_closed_form(1.0, 1.0, 2.0, grid, flat)
        assert traj.final[0] == pytest.approx(np.exp(-1.0), rel=1e-14)

    def test_euler_tracks_closed_form_on_shared_path(self):
        from nsde.solver import integrate

        grid = make_time_grid(1.0, 10_000)
        path = sample_brownian_path(RandomStream(93), grid, 1)
        exact = gbm_closed_form(1.0, 1.0, 1.0, grid, path)
        em = integrate(np.array([1.0]), grid, path, SCALAR,
                       DiffusionSpec("multiplicative", 1.0))
        assert abs(em.final[0] - exact.final[0]) / abs(exact.final[0]) < 0.01

    def test_strong_error_halves_when_dt_quarters(self):
        # Mean |X_T - X_T_hat| over paths scales like sqrt(dt); quartering
        # dt should halve it, within a 1.5x band. Single paths are far too
        # noisy for this, hence the 256-path average.
        from nsde.solver import integrate

        fine_grid = make_time_grid(1.0, 2**12)

        def mean_err(n_steps: int, n_paths: int = 256) -> float:
            grid = make_time_grid(1.0, n_steps)
            ratio = fine_grid.n_steps // n_steps
            total = 0.0
            for i in range(n_paths):
                fine = sample_brownian_path(RandomStream(94).bump(i), fine_grid, 1)
                exact = gbm_closed_form(1.0, 1.0, 1.0, fine_grid, fine)
                coarse = fine.increments.reshape(n_steps, ratio, 1).sum(axis=1)
                path = type(fine)(grid=grid, increments=coarse)
                em = integrate(np.array([1.0]), grid, path, SCALAR,
                               DiffusionSpec("multiplicative", 1.0))
                total += abs(em.final[0] - exact.final[0])
            return total / n_paths

        ratio = mean_err(2**6) / mean_err(2**8)
        assert 2.0 / 1.5 <= ratio <= 2.0 * 1.5

    def test_sigma_without_path_rejected(self):
        with pytest.raises(ValueError):
            gbm_closed_form(1.0, 1.0, 1.0, make_time_grid(1.0, 10), None)


class TestCertificate:
    def test_figure_point(self):
        cert = corollary_bound(1.0, 2.8)
        assert cert.bound == pytest.approx(-2.92, abs=1e-12)
        assert cert.stable

    def test_threshold_boundary(self):
        # sigma = 1, L = 1/2 puts sigma^2 exactly at 2L; the certificate
        # requires strict excess, so the boundary itself is not certified.
        cert = corollary_bound(0.5, 1.0)
        assert cert.bound == 0.0
        assert not cert.stable

    def test_near_threshold_rate_is_tiny(self):
        cert = corollary_bound(1.0, np.sqrt(2.0))
        assert cert.bound == pytest.approx(0.0, abs=1e-12)

    def test_noise_free_positive_rate(self):
        cert = corollary_bound(1.0, 0.0)
        assert cert.bound == 1.0
        assert not cert.stable

    def test_constants_layout(self):
        cert = corollary_bound(0.7, 1.1)
        assert cert.p == 2.0 and cert.c1 == 1.0
        assert cert.c2 == pytest.approx(2 * 0.7 + 1.1**2)
        assert cert.c3 == pytest.approx(4 * 1.1**2)

    def test_negative_arguments_rejected(self):
        with pytest.raises(ValueError):
            corollary_bound(-1.0, 1.0)


@pytest.fixture(scope="module")
def sweep_rows():
    grid = make_time_grid(10.0, 10_000)
    return stability_sweep(
        SCALAR, [0.0, 0.5, 1.0, 1.25, 1.5, 2.0, 2.8],
        np.array([1.0]), np.array([1e-3]), grid, 64, RandomStream(8),
    )


class TestSweep:

    def test_exponents_track_closed_form(self, sweep_rows):
        rows = sweep_rows
        for r in rows:
            assert r.lambda_hat == pytest.approx(1.0 - r.sigma**2 / 2, abs=0.15), r.sigma

    def test_bound_attained_for_linear_drift(self, sweep_rows):
        rows = sweep_rows
        for r in rows:
            assert r.bound == pytest.approx(-(r.sigma**2 / 2 - 1.0), abs=1e-12)

    def test_zero_crossing_near_theory(self, sweep_rows):
        rows = sweep_rows
        x = exponent_zero_crossing(rows)
        assert x is not None
        assert np.sqrt(2.0) - 0.11 <= x <= np.sqrt(2.0) + 0.11

    def test_csv_format(self, sweep_rows):
        rows = sweep_rows
        buf = io.StringIO()
        sweep_to_csv(rows, buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "sigma,lambda_hat,stderr,bound,stable,overflow_fraction"
        assert len(lines) == 8
        assert lines[1].split(",")[4] in ("true", "false")


class TestZeroCrossing:
    def test_interpolates_between_brackets(self):
        rows = [
            SweepRow(1.0, 0.5, 0.0, 0.0, False, 0.0),
            SweepRow(2.0, -0.5, 0.0, 0.0, True, 0.0),
        ]
        assert exponent_zero_crossing(rows) == pytest.approx(1.5)

    def test_none_when_no_crossing(self):
        rows = [
            SweepRow(1.0, 0.5, 0.0, 0.0, False, 0.0),
            SweepRow(2.0, 0.4, 0.0, 0.0, False, 0.0),
        ]
        assert exponent_zero_crossing(rows) is None

    def test_skips_non_finite_cells(self):
        rows = [
            SweepRow(0.5, np.inf, np.nan, 0.0, False, 1.0),
            SweepRow(1.0, 0.5, 0.0, 0.0, False, 0.0),
            SweepRow(2.0, -0.5, 0.0, 0.0, True, 0.0),
        ]
        assert exponent_zero_crossing(rows) == pytest.approx(1.5)
