"""Forward dynamics, the discretised simulator and its taped twin."""

import numpy as np
import pytest

from lndsm.autodiff import Tape
from lndsm.errors import NumericalError
from lndsm.gmm import DiagonalGmm
from lndsm.objectives import vp_chain_moments
from lndsm.sde import (LANGEVIN, VP, DiffusionSpec, TimeGrid,
                       conditional_score, diffusion_coeff, draw_step_noise,
                       drift, em_simulate, em_simulate_graph)


def _single_gaussian(var=1.0, dim=2):
    return DiagonalGmm.from_params([1.0], [np.zeros(dim)],
                                   [np.full(dim, var)])


class TestTimeGrid:
    def test_uniform_grid_shape(self):
        grid = TimeGrid.uniform(1.5, 100)
        assert grid.n_steps == 100
        assert grid.t[0] == 0.0
        assert grid.horizon == 1.5
        np.testing.assert_allclose(grid.dt, 0.015)

    def test_rejects_nonmonotone(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))

    def test_rejects_nonzero_start(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.1, 0.5]))


class TestDrift:
    def test_vp_drift_at_t0(self):
        spec = DiffusionSpec(VP, beta0=0.1, beta1=20.0, horizon=1.0)
        np.testing.assert_allclose(drift(spec, [[1.0, 1.0]], 0.0),
                                   [[-0.05, -0.05]], rtol=1e-14)

    def test_langevin_standard_normal_drift_zero_at_mean(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian())
        np.testing.assert_allclose(drift(spec, [[0.0, 0.0]], 0.3), 0.0,
                                   atol=1e-14)

    def test_langevin_symmetric_mixture_drift_zero_at_center(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-2.0], [2.0]],
                                      [[1.0], [1.0]])
        spec = DiffusionSpec(LANGEVIN, reference=gmm)
        np.testing.assert_allclose(drift(spec, [[0.0]], 0.0), 0.0,
                                   atol=1e-14)

    def test_langevin_requires_reference(self):
        with pytest.raises(ValueError):
            DiffusionSpec(LANGEVIN)

    def test_vp_requires_ordered_positive_schedule(self):
        with pytest.raises(ValueError):
            DiffusionSpec(VP, beta0=2.0, beta1=1.0)

    def test_dimension_mismatch(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(dim=2))
        with pytest.raises(ValueError):
            drift(spec, [[0.0, 0.0, 0.0]], 0.0)


class TestDiffusionCoeff:
    def test_langevin_default_is_sqrt2(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian())
        assert diffusion_coeff(spec, 0.5) == pytest.approx(np.sqrt(2.0),
                                                           rel=1e-15)

    def test_vp_endpoints(self):
        spec = DiffusionSpec(VP, beta0=0.1, beta1=20.0, horizon=1.0)
        assert diffusion_coeff(spec, 1.0) == pytest.approx(np.sqrt(20.0))
        assert diffusion_coeff(spec, 0.0) == pytest.approx(np.sqrt(0.1))

    def test_time_outside_range_raises(self):
        spec = DiffusionSpec(VP, horizon=1.0)
        with pytest.raises(ValueError):
            diffusion_coeff(spec, 1.5)
        with pytest.raises(ValueError):
            diffusion_coeff(spec, -0.1)


class TestSimulator:
    def test_pure_noise_step(self):
        # Start exactly at the reference mean: the drift vanishes, so one
        # unit step with unit diffusion is z0 + u.
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(var=1.0),
                             g_const=1.0, horizon=1.0)
        grid = TimeGrid.uniform(1.0, 1)
        rng = np.random.default_rng(0)
        traj = em_simulate(spec, np.zeros((16, 2)), grid, rng)
        np.testing.assert_array_equal(traj.states[1], traj.noise[0])

    def test_reconstruction_invariant(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             horizon=1.5)
        grid = TimeGrid.uniform(1.5, 60)
        rng = np.random.default_rng(1)
        traj = em_simulate(spec, rng.normal(size=(32, 2)), grid, rng)
        assert traj.reconstruction_residual() < 1e-12

    def test_vp_terminal_moments_match_exact_chain(self):
        spec = DiffusionSpec(VP, beta0=0.1, beta1=20.0, horizon=1.0)
        grid = TimeGrid.uniform(1.0, 100)
        rng = np.random.default_rng(2)
        m_traj = 10_000
        traj = em_simulate(spec, np.full((m_traj, 1), 0.5), grid, rng)
        z = traj.terminal()[:, 0]
        means, varis = vp_chain_moments(spec, grid, 0.5, 0.0)
        assert abs(z.mean() - means[-1]) < 3 * z.std(ddof=1) / np.sqrt(m_traj)
        assert abs(z.var(ddof=1) - varis[-1]) < \
            3 * z.var(ddof=1) * np.sqrt(2.0 / (m_traj - 1))

    def test_langevin_long_run_converges_to_reference(self):
        # Overlapping 1-D mixture so the dynamics mixes within the
        # simulated horizon; start from a point mass at zero.
        gmm = DiagonalGmm.from_params([0.6, 0.4], [[-1.5], [1.5]],
                                      [[1.0], [1.0]])
        spec = DiffusionSpec(LANGEVIN, reference=gmm, horizon=20.0)
        grid = TimeGrid.uniform(20.0, 2000)
        rng = np.random.default_rng(3)
        m_traj = 8000
        z = em_simulate(spec, np.zeros((m_traj, 1)), grid, rng).terminal()
        mean_ref, var_ref = gmm.mixture_moments()
        se_mean = z.std(ddof=1) / np.sqrt(m_traj)
        se_var = z.var(ddof=1) * np.sqrt(2.0 / (m_traj - 1))
        assert abs(z.mean() - mean_ref[0]) < 3 * se_mean + 0.05
        assert abs(z.var(ddof=1) - var_ref[0]) < 3 * se_var + 0.1

    def test_noise_stream_order_is_stepwise(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             horizon=1.0)
        grid = TimeGrid.uniform(1.0, 5)
        draws = draw_step_noise(grid, 4, 2, np.random.default_rng(9))
        want = np.random.default_rng(9).standard_normal(5 * 4 * 2)
        np.testing.assert_array_equal(draws.reshape(-1), want)

    def test_nonfinite_state_reports_step(self):
        spec = DiffusionSpec(VP, beta0=20.0, beta1=20.0, horizon=1.0)
        grid = TimeGrid.uniform(1.0, 2)
        with pytest.raises(NumericalError, match="step"):
            em_simulate(spec, np.full((2, 1), 1e308), grid,
                        np.random.default_rng(4))


class TestConditionalScore:
    def test_zero_noise_gives_zero(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             horizon=1.0)
        grid = TimeGrid.uniform(1.0, 3)
        noise = np.zeros((3, 2, 2))
        traj = em_simulate(spec, np.zeros((2, 2)), grid, noise=noise)
        np.testing.assert_array_equal(conditional_score(traj, 1), 0.0)

    def test_direct_formula(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             g_const=0.5, horizon=1.0)
        grid = TimeGrid.uniform(1.0, 1)
        noise = np.array([[[1.0, -1.0]]])
        traj = em_simulate(spec, np.zeros((1, 2)), grid, noise=noise)
        np.testing.assert_allclose(conditional_score(traj, 1), [[-2.0, 2.0]],
                                   rtol=1e-14)

    def test_default_langevin_scale(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             horizon=1.5)
        grid = TimeGrid.uniform(1.5, 100)   # dt = 0.015
        noise = np.zeros((100, 1, 2))
        noise[0, 0] = [1.0, 0.0]
        traj = em_simulate(spec, np.zeros((1, 2)), grid, noise=noise)
        np.testing.assert_allclose(conditional_score(traj, 1)[0, 0],
                                   -1.0 / (np.sqrt(2.0) * np.sqrt(0.015)),
                                   rtol=1e-12)
        assert conditional_score(traj, 1)[0, 1] == 0.0

    def test_index_bounds(self):
        spec = DiffusionSpec(LANGEVIN, reference=_single_gaussian(),
                             horizon=1.0)
        grid = TimeGrid.uniform(1.0, 3)
        traj = em_simulate(spec, np.zeros((1, 2)), grid,
                           np.random.default_rng(5))
        with pytest.raises(IndexError):
            conditional_score(traj, 0)
        with pytest.raises(IndexError):
            conditional_score(traj, 4)


class TestGraphSimulator:
    def test_graph_matches_numpy_on_shared_noise(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]],
                                      [[0.5, 0.8], [0.7, 0.4]])
        spec = DiffusionSpec(LANGEVIN, reference=gmm, horizon=1.5)
        grid = TimeGrid.uniform(1.5, 25)
        rng = np.random.default_rng(6)
        z0 = rng.normal(size=(12, 2))
        noise = draw_step_noise(grid, 12, 2, rng)
        traj = em_simulate(spec, z0, grid, noise=noise)
        tape = Tape()
        gtraj = em_simulate_graph(tape, spec, tape.param(z0.copy()), grid,
                                  noise)
        for n in range(grid.n_steps + 1):
            np.testing.assert_array_equal(gtraj.states[n].data, traj.states[n])
        for n in range(grid.n_steps):
            np.testing.assert_array_equal(gtraj.means[n].data, traj.means[n])
