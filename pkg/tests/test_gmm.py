"""Diagonal mixture: densities, scores, sampling, EM fitting, entropy."""

import numpy as np
import pytest

from lndsm.errors import NumericalError
from lndsm.gmm import LOG_2PI, DiagonalGmm


def naive_log_density(gmm, z):
    """Direct summation without log-sum-exp, for well-scaled inputs."""
    total = np.zeros(z.shape[0])
    for w, mu, var in zip(gmm.weights_, gmm.means_, gmm.variances_):
        quad = np.sum((z - mu) ** 2 / var, axis=1)
        norm = np.prod(2.0 * np.pi * var) ** -0.5
        total += w * norm * np.exp(-0.5 * quad)
    return np.log(total)


class TestLogDensity:
    def test_standard_normal_at_origin(self):
        gmm = DiagonalGmm.from_params([1.0], [[0.0]], [[1.0]])
        np.testing.assert_allclose(gmm.score_samples([[0.0]]),
                                   [-0.5 * LOG_2PI], rtol=1e-14)

    def test_symmetric_two_component_density_is_even(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-2.0], [2.0]],
                                      [[1.0], [1.0]])
        z = np.linspace(-4, 4, 33).reshape(-1, 1)
        np.testing.assert_allclose(gmm.score_samples(z),
                                   gmm.score_samples(-z), rtol=1e-13)

    def test_matches_naive_summation(self):
        rng = np.random.default_rng(7)
        gmm = DiagonalGmm.from_params(
            [0.3, 0.45, 0.25], rng.normal(size=(3, 2)),
            rng.uniform(0.5, 2.0, size=(3, 2)))
        probes = rng.normal(size=(20, 2))
        np.testing.assert_allclose(gmm.score_samples(probes),
                                   naive_log_density(gmm, probes),
                                   rtol=1e-12)

    def test_dimension_mismatch_raises(self):
        gmm = DiagonalGmm.from_params([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(ValueError):
            gmm.score_samples(np.zeros((3, 3)))


class TestScore:
    def test_single_gaussian_score(self):
        gmm = DiagonalGmm.from_params([1.0], [[1.0, -1.0]], [[2.0, 0.5]])
        z = np.array([[0.0, 0.0], [1.0, -1.0]])
        np.testing.assert_allclose(gmm.log_density_grad(z),
                                   (gmm.means_[0] - z) / gmm.variances_[0],
                                   rtol=1e-14)

    def test_symmetric_mixture_score_vanishes_at_center(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-3.0], [3.0]],
                                      [[1.0], [1.0]])
        np.testing.assert_allclose(gmm.log_density_grad([[0.0]]), 0.0,
                                   atol=1e-14)

    def test_score_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        gmm = DiagonalGmm.from_params(
            [0.4, 0.6], rng.normal(size=(2, 3)),
            rng.uniform(0.4, 1.4, size=(2, 3)))
        probes = rng.normal(size=(20, 3))
        grad = gmm.log_density_grad(probes)
        eps = 1e-6
        for j in range(3):
            d = np.zeros(3)
            d[j] = eps
            fd = (gmm.score_samples(probes + d)
                  - gmm.score_samples(probes - d)) / (2 * eps)
            np.testing.assert_allclose(grad[:, j], fd, rtol=1e-6, atol=1e-9)

    def test_hessian_matches_score_finite_differences(self):
        rng = np.random.default_rng(9)
        gmm = DiagonalGmm.from_params(
            [0.5, 0.5], rng.normal(size=(2, 2)),
            rng.uniform(0.5, 1.5, size=(2, 2)))
        probes = rng.normal(size=(10, 2))
        hess = gmm.log_density_hessian(probes)
        eps = 1e-6
        for j in range(2):
            d = np.zeros(2)
            d[j] = eps
            fd = (gmm.log_density_grad(probes + d)
                  - gmm.log_density_grad(probes - d)) / (2 * eps)
            np.testing.assert_allclose(hess[:, :, j], fd, rtol=1e-5,
                                       atol=1e-8)


class TestSampling:
    def test_single_component_mean_within_3se(self):
        gmm = DiagonalGmm.from_params([1.0], [[2.0, -1.0]], [[1.0, 1.0]])
        X = gmm.sample(10_000, np.random.default_rng(10))
        se = 1.0 / np.sqrt(10_000)
        assert np.all(np.abs(X.mean(axis=0) - [2.0, -1.0]) < 3 * se)

    def test_component_frequencies_binomial(self):
        gmm = DiagonalGmm.from_params([0.9, 0.1], [[-5.0], [5.0]],
                                      [[1.0], [1.0]])
        _, comps = gmm.sample(10_000, np.random.default_rng(11),
                              return_components=True)
        freq = np.mean(comps == 0)
        assert abs(freq - 0.9) < 3 * np.sqrt(0.09 / 10_000)

    def test_seed_determinism(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-1.0], [1.0]],
                                      [[1.0], [1.0]])
        a = gmm.sample(5, np.random.default_rng(12))
        b = gmm.sample(5, np.random.default_rng(12))
        np.testing.assert_array_equal(a, b)


class TestResponsibilities:
    def test_single_component_is_one(self):
        gmm = DiagonalGmm.from_params([1.0], [[0.0]], [[1.0]])
        np.testing.assert_array_equal(gmm.responsibilities([[3.0]]), [[1.0]])

    def test_well_separated_assignment_confident(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[0.0], [12.0]],
                                      [[1.0], [1.0]])
        r = gmm.responsibilities([[0.0]])
        assert r[0, 0] > 0.999

    def test_equidistant_point_splits_evenly(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-1.0], [1.0]],
                                      [[1.0], [1.0]])
        np.testing.assert_allclose(gmm.responsibilities([[0.0]]),
                                   [[0.5, 0.5]], rtol=1e-12)


class TestFit:
    def test_recovers_single_gaussian(self):
        rng = np.random.default_rng(13)
        n = 4000
        X = 1.5 + 0.8 * rng.standard_normal((n, 2))
        gmm = DiagonalGmm(n_components=1, seed=0).fit(X)
        se = 0.8 / np.sqrt(n)
        assert np.all(np.abs(gmm.means_[0] - 1.5) < 3 * se + 1e-9)
        assert np.all(np.abs(gmm.variances_[0] - 0.64) / 0.64 < 0.10)

    def test_recovers_two_cluster_weights(self):
        rng = np.random.default_rng(14)
        X = np.concatenate([rng.normal(-4, 1, size=(1000, 2)),
                            rng.normal(4, 1, size=(1000, 2))])
        gmm = DiagonalGmm(n_components=2, seed=1).fit(X)
        np.testing.assert_allclose(np.sort(gmm.weights_), [0.5, 0.5],
                                   atol=0.05)

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(15)
        X = np.concatenate([rng.normal(-2, 1, size=(400, 1)),
                            rng.normal(2, 1, size=(400, 1))])
        gmm = DiagonalGmm(n_components=2, seed=2).fit(X)
        assert np.all(np.diff(gmm.log_likelihoods_) >= -1e-9)

    def test_fit_requires_enough_rows(self):
        with pytest.raises(ValueError):
            DiagonalGmm(n_components=3).fit(np.zeros((2, 2)))


class TestEntropy:
    def test_standard_normal_entropy(self):
        d = 3
        gmm = DiagonalGmm.from_params([1.0], [np.zeros(d)], [np.ones(d)])
        est, se = gmm.entropy_mc(20_000, np.random.default_rng(16))
        want = 0.5 * d * (LOG_2PI + 1.0)
        assert abs(est - want) < 3 * se

    def test_separated_mixture_entropy_adds_log2(self):
        gmm = DiagonalGmm.from_params([0.5, 0.5], [[-30.0], [30.0]],
                                      [[1.0], [1.0]])
        est, se = gmm.entropy_mc(20_000, np.random.default_rng(17))
        want = 0.5 * (LOG_2PI + 1.0) + np.log(2.0)
        assert abs(est - want) < 3 * se

    def test_standard_error_scales_as_inverse_sqrt_n(self):
        gmm = DiagonalGmm.from_params([0.3, 0.7], [[-2.0], [2.0]],
                                      [[1.0], [0.5]])
        ratios = []
        for seed in range(20):
            _, se_n = gmm.entropy_mc(2000, np.random.default_rng(100 + seed))
            _, se_4n = gmm.entropy_mc(8000, np.random.default_rng(200 + seed))
            ratios.append(se_4n / se_n)
        assert 0.4 < np.mean(ratios) < 0.6

    def test_entropy_needs_two_samples(self):
        gmm = DiagonalGmm.from_params([1.0], [[0.0]], [[1.0]])
        with pytest.raises(ValueError):
            gmm.entropy_mc(1)


class TestInvariantChecks:
    def test_from_params_validates_weights(self):
        with pytest.raises(ValueError):
            DiagonalGmm.from_params([0.5, 0.4], [[0.0], [1.0]],
                                    [[1.0], [1.0]])

    def test_from_params_validates_variances(self):
        with pytest.raises(ValueError):
            DiagonalGmm.from_params([1.0], [[0.0]], [[0.0]])

    def test_empty_component_reseeds_then_fails(self):
        # Two identical points cannot feed three components forever.
        X = np.array([[0.0, 0.0]] * 3)
        with pytest.raises((NumericalError, ValueError)):
            DiagonalGmm(n_components=3, seed=3, max_iter=50).fit(X)
