"""
Tests for Matérn kernels, covariance factorization and GP sampling
"""

import numpy as np
import pytest
from pydantic import ValidationError

from mino.exceptions import FactorizationError, GeometryError
from mino.gaussian_field import (DistanceMode, GaussianProcessSampler, GPSpec, Smoothness, cholesky_with_jitter,
                                 covariance_matrix, matern, sample_gp)
from mino.geometry import Box, PointSet, Sphere, make_spherical_point_set


def _unit(nu, length_scale=1.0):
    return GPSpec(length_scale=length_scale, smoothness=nu)


class TestGPSpec:
    """Test kernel parameter validation"""

    def test_defaults(self):
        """Test the base-measure defaults (l=0.01, nu=0.5, unit variance)"""
        spec = GPSpec()
        assert spec.length_scale == 0.01
        assert spec.smoothness is Smoothness.HALF
        assert spec.variance == 1.0
        assert spec.jitter == 0.0

    def test_numeric_smoothness(self):
        """Test that nu may be given as a number"""
        assert GPSpec(smoothness=1.5).smoothness is Smoothness.THREE_HALVES
        with pytest.raises(ValidationError):
            GPSpec(smoothness=2.0)

    def test_positive_parameters(self):
        """Test that non-positive length scale and variance are rejected"""
        with pytest.raises(ValidationError):
            GPSpec(length_scale=0.0)
        with pytest.raises(ValidationError):
            GPSpec(variance=-1.0)
        with pytest.raises(ValidationError):
            GPSpec(jitter=-1e-6)


class TestMatern:
    """Test the closed-form Matérn kernels"""

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_zero_lag(self, nu):
        """Test that k(0) = variance"""
        spec = GPSpec(length_scale=0.3, smoothness=nu, variance=2.5)
        assert matern(0.0, spec) == pytest.approx(2.5)

    def test_half(self):
        """Test nu=0.5 at d=1"""
        assert matern(1.0, _unit(0.5)) == pytest.approx(np.exp(-1.0))

    def test_three_halves(self):
        """Test nu=1.5 at d=1"""
        assert matern(1.0, _unit(1.5)) == pytest.approx((1 + np.sqrt(3)) * np.exp(-np.sqrt(3)))

    def test_five_halves(self):
        """Test nu=2.5 at d=1"""
        s = np.sqrt(5.0)
        assert matern(1.0, _unit(2.5)) == pytest.approx((1 + s + 5.0 / 3.0) * np.exp(-s))

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
    def test_non_increasing(self, nu):
        """Test monotone decay on a distance grid"""
        values = matern(np.linspace(0.0, 5.0, 501), _unit(nu, 0.7))
        assert np.all(np.diff(values) <= 0)

    def test_negative_distance(self):
        """Test that negative distances raise"""
        with pytest.raises(GeometryError):
            matern(-0.1, _unit(0.5))


class TestCovariance:
    """Test covariance matrices on point sets"""

    def test_single_point(self):
        """Test N=1 gives [[variance]]"""
        points = PointSet(positions=[[0.5, 0.5]], domain=Box.unit(2))
        np.testing.assert_array_equal(covariance_matrix(points, GPSpec(variance=3.0)), [[3.0]])

    def test_exact_symmetry_and_diagonal(self, mesh_points, smooth_gp):
        """Test max|C - C^T| = 0 and unit diagonal"""
        cov = covariance_matrix(mesh_points, smooth_gp)
        assert np.abs(cov - cov.T).max() == 0.0
        np.testing.assert_allclose(np.diag(cov), 1.0)

    def test_elementwise_oracle(self, rng, smooth_gp):
        """Test 5 random points against matern() of each distance"""
        points = PointSet(positions=rng.uniform(size=(5, 2)), domain=Box.unit(2))
        cov = covariance_matrix(points, smooth_gp)
        for i in range(5):
            for j in range(5):
                d = np.linalg.norm(points.positions[i] - points.positions[j])
                assert cov[i, j] == pytest.approx(matern(d, smooth_gp), rel=1e-12)

    def test_chordal_depends_only_on_angle(self):
        """Test that rotating a point pair on the sphere keeps its covariance"""
        spec = GPSpec(length_scale=0.5, smoothness=1.5, distance=DistanceMode.CHORDAL)
        a = np.array([[1.0, 0.0, 0.0], [np.cos(0.4), np.sin(0.4), 0.0]])
        theta = 1.1
        rot = np.array([[1.0, 0.0, 0.0], [0.0, np.cos(theta), -np.sin(theta)], [0.0, np.sin(theta), np.cos(theta)]])
        rz = np.array([[np.cos(0.7), -np.sin(0.7), 0.0], [np.sin(0.7), np.cos(0.7), 0.0], [0.0, 0.0, 1.0]])
        b = a @ (rot @ rz).T
        cov_a = covariance_matrix(PointSet(positions=a, domain=Sphere(1.0)), spec)
        cov_b = covariance_matrix(PointSet(positions=b, domain=Sphere(1.0)), spec)
        assert cov_a[0, 1] == pytest.approx(cov_b[0, 1], rel=1e-12)

    def test_chordal_needs_sphere(self, mesh_points):
        """Test that chordal mode rejects box domains"""
        with pytest.raises(GeometryError, match="sphere"):
            covariance_matrix(mesh_points, GPSpec(distance=DistanceMode.CHORDAL))


class TestCholeskyWithJitter:
    """Test factorization with jitter escalation"""

    def test_identity(self):
        """Test the identity factor needs no jitter"""
        factor = cholesky_with_jitter(np.eye(4), 0.0)
        np.testing.assert_array_equal(factor.lower, np.eye(4))
        assert factor.jitter_used == 0.0

    def test_rank_deficient(self):
        """Test that a singular matrix succeeds with positive jitter"""
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])
        factor = cholesky_with_jitter(cov, 0.0)
        assert factor.jitter_used > 0
        np.testing.assert_allclose(factor.lower @ factor.lower.T, cov + factor.jitter_used * np.eye(2))

    def test_random_spd_reconstruction(self, rng):
        """Test L L^T = C on a random SPD matrix"""
        a = rng.standard_normal((10, 10))
        cov = a @ a.T + 10 * np.eye(10)
        factor = cholesky_with_jitter(cov)
        error = np.linalg.norm(factor.lower @ factor.lower.T - cov) / np.linalg.norm(cov)
        assert error < 1e-10
        assert np.allclose(factor.lower, np.tril(factor.lower))

    def test_initial_jitter_is_applied(self):
        """Test that a user-supplied jitter is used as-is when it works"""
        factor = cholesky_with_jitter(np.eye(3), 1e-3)
        assert factor.jitter_used == 1e-3
        np.testing.assert_allclose(np.diag(factor.lower), np.sqrt(1.001))

    def test_indefinite_matrix_fails(self):
        """Test the error after exhausting the jitter schedule"""
        with pytest.raises(FactorizationError) as info:
            cholesky_with_jitter(np.array([[1.0, 0.0], [0.0, -1.0]]))
        assert info.value.jitter > 0
        assert "jitter" in str(info.value)

    def test_tiny_length_scale_grid(self):
        """Test near-duplicate points with a long length scale factorize"""
        points = PointSet(positions=np.linspace(0.5, 0.5 + 1e-9, 20)[:, None], domain=Box.unit(1))
        sampler = GaussianProcessSampler(GPSpec(length_scale=1.0, smoothness=2.5), points)
        assert sampler.factor.jitter_used > 0


class TestSampleGP:
    """Test GP sampling"""

    def test_shape_and_determinism(self, mesh_points, smooth_gp):
        """Test output shape and bitwise reproducibility"""
        a = sample_gp(smooth_gp, mesh_points, 6, rng_seed=11)
        b = sample_gp(smooth_gp, mesh_points, 6, rng_seed=11)
        assert a.values.shape == (6, 1, mesh_points.n_points)
        np.testing.assert_array_equal(a.values, b.values)
        c = sample_gp(smooth_gp, mesh_points, 6, rng_seed=12)
        assert not np.array_equal(a.values, c.values)

    def test_channels(self, mesh_points, smooth_gp):
        """Test independent channels for f_dim > 1"""
        batch = sample_gp(smooth_gp, mesh_points, 4, rng_seed=0, n_channels=3)
        assert batch.f_dim == 3
        assert not np.array_equal(batch.values[:, 0], batch.values[:, 1])

    def test_monte_carlo_moments(self):
        """Test per-point variance, mean and nearby covariance over 20000 samples"""
        spec = GPSpec(length_scale=0.2, smoothness=1.5)
        points = PointSet(positions=[[0.2], [0.25], [0.8]], domain=Box.unit(1))
        n = 20000
        values = sample_gp(spec, points, n, rng_seed=3).values[:, 0, :]
        variance = values.var(axis=0)
        assert np.all((variance > 0.95) & (variance < 1.05))
        assert np.all(np.abs(values.mean(axis=0)) < 4 / np.sqrt(n))

        target = matern(0.05, spec)
        product = values[:, 0] * values[:, 1]
        standard_error = product.std() / np.sqrt(n)
        assert abs(product.mean() - target) < 3 * standard_error

    def test_sphere_sampling(self):
        """Test chordal sampling on a spherical point set"""
        points = make_spherical_point_set(8, 4)
        spec = GPSpec(length_scale=0.5, smoothness=1.5, distance=DistanceMode.CHORDAL)
        batch = sample_gp(spec, points, 3, rng_seed=0)
        assert np.all(np.isfinite(batch.values))

    def test_sample_count_precondition(self, mesh_points, smooth_gp):
        """Test that n_samples < 1 is rejected"""
        with pytest.raises(GeometryError):
            sample_gp(smooth_gp, mesh_points, 0, rng_seed=0)

    def test_sampler_reuses_factor(self, mesh_points, smooth_gp):
        """Test that the sampler factorizes once"""
        sampler = GaussianProcessSampler(smooth_gp, mesh_points)
        first = sampler.factor
        sampler.sample(2, np.random.default_rng(0))
        assert sampler.factor is first
