import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resinv.errors import ConfigError, NumericalError
from resinv.geostat import (
    CovarianceOperator,
    anisotropy_matrix,
    build_covariance,
    covariance_from_points,
    sample_field,
    spherical_cov,
)
from resinv.grid import Field, Grid


class TestSphericalCov:
    def test_coincident_points(self):
        assert spherical_cov((1.0, 2.0), (1.0, 2.0), a=10.0) == 1.0

    def test_at_range_vanishes(self):
        # 1 - 3/2 + 1/2 = 0 exactly at h = a
        assert spherical_cov((0.0, 0.0), (10.0, 0.0), a=10.0) == 0.0

    def test_half_range_value(self):
        # hand evaluation: 1 - 0.75 + 0.0625 = 0.3125
        assert spherical_cov((0.0, 0.0), (5.0, 0.0), a=10.0) == pytest.approx(0.3125, abs=1e-15)

    def test_beyond_range_zero(self):
        assert spherical_cov((0.0, 0.0), (11.0, 0.0), a=10.0) == 0.0

    def test_nonpositive_range_rejected(self):
        with pytest.raises(ConfigError):
            spherical_cov((0, 0), (1, 0), a=0.0)

    @given(st.floats(0.1, 50.0), st.floats(0.1, 50.0))
    def test_symmetric_in_arguments(self, x, y):
        a = 30.0
        assert spherical_cov((0, 0), (x, y), a) == spherical_cov((x, y), (0, 0), a)

    @settings(max_examples=30)
    @given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8))
    def test_non_increasing_in_separation(self, fractions):
        a = 7.0
        hs = sorted(f * a for f in fractions)
        vals = [spherical_cov((0, 0), (h, 0), a) for h in hs]
        assert all(v1 >= v2 - 1e-15 for v1, v2 in zip(vals, vals[1:]))

    def test_anisotropy_shortens_cross_range(self):
        M = anisotropy_matrix(theta=0.0, axis_ratio=2.0)
        along = spherical_cov((0, 0), (5.0, 0.0), a=10.0, M=M)
        across = spherical_cov((0, 0), (0.0, 5.0), a=10.0, M=M)
        assert across < along


class TestBuildCovariance:
    def test_unit_diagonal_at_kappa_one(self):
        grid = Grid(3, 3, 30.0, 30.0)
        op = build_covariance(grid, a=12.0, kappa=1.0)
        assert np.allclose(np.diag(op.matrix), 1.0)

    def test_kappa_scales_linearly(self):
        grid = Grid(3, 3, 30.0, 30.0)
        op1 = build_covariance(grid, a=12.0, kappa=1.0)
        op100 = build_covariance(grid, a=12.0, kappa=100.0)
        assert np.allclose(op100.matrix, op1.matrix / 100.0)

    def test_two_point_half_range_entry(self):
        op = covariance_from_points([(0.0, 0.0), (5.0, 0.0)], a=10.0, kappa=1.0)
        assert op.matrix[0, 1] == pytest.approx(0.3125, abs=1e-15)
        assert op.matrix[1, 0] == pytest.approx(0.3125, abs=1e-15)

    def test_indefinite_matrix_rejected(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3, -1
        with pytest.raises(NumericalError):
            CovarianceOperator(None, bad)

    def test_scaled_matches_rebuild(self):
        grid = Grid(4, 4, 40.0, 40.0)
        base = build_covariance(grid, a=15.0, kappa=1.0)
        direct = build_covariance(grid, a=15.0, kappa=25.0)
        assert np.allclose(base.scaled(25.0).matrix, direct.matrix)


class TestApply:
    def test_zero_vector(self):
        grid = Grid(3, 3, 30.0, 30.0)
        op = build_covariance(grid, a=12.0)
        assert np.all(op.apply(np.zeros(9)) == 0.0)

    def test_short_range_gives_identity(self):
        grid = Grid(3, 3, 30.0, 30.0)  # cell spacing 10
        op = build_covariance(grid, a=5.0, kappa=1.0)
        v = np.arange(9.0)
        assert np.allclose(op.apply(v), v)

    def test_matches_hand_assembled_product(self):
        # three points in a row, explicit scalar oracle
        pts = [(0.0, 0.0), (4.0, 0.0), (8.0, 0.0)]
        a = 10.0
        op = covariance_from_points(pts, a=a, kappa=2.0)
        rng = np.random.default_rng(0)
        v = rng.standard_normal(3)
        expected = np.zeros(3)
        for i in range(3):
            for j in range(3):
                expected[i] += spherical_cov(pts[i], pts[j], a) / 2.0 * v[j]
        assert np.allclose(op.apply(v), expected, rtol=1e-14)

    def test_dimension_mismatch(self):
        grid = Grid(3, 3, 30.0, 30.0)
        op = build_covariance(grid, a=12.0)
        with pytest.raises(ConfigError):
            op.apply(np.zeros(4))

    def test_linearity(self):
        grid = Grid(4, 4, 40.0, 40.0)
        op = build_covariance(grid, a=20.0)
        rng = np.random.default_rng(1)
        v, w = rng.standard_normal((2, 16))
        alpha = 1.7
        left = op.apply(alpha * v + w)
        right = alpha * op.apply(v) + op.apply(w)
        assert np.allclose(left, right, rtol=1e-12, atol=1e-12 * np.abs(right).max())

    def test_positive_semidefinite_quadratic_form(self):
        grid = Grid(5, 5, 100.0, 100.0)
        op = build_covariance(grid, a=40.0)
        tr = np.trace(op.matrix)
        rng = np.random.default_rng(2)
        for _ in range(20):
            v = rng.standard_normal(25)
            assert v @ op.apply(v) >= -1e-10 * (v @ v) * tr / 25

    def test_inv_norm_matches_dense_solve(self):
        grid = Grid(4, 4, 40.0, 40.0)
        op = build_covariance(grid, a=15.0, kappa=3.0)
        rng = np.random.default_rng(3)
        v = rng.standard_normal(16)
        expected = v @ np.linalg.solve(op.matrix, v)
        assert op.inv_norm_sq(v) == pytest.approx(expected, rel=1e-10)


class TestSampling:
    def test_vanishing_variance_returns_mean(self):
        grid = Grid(3, 3, 30.0, 30.0)
        op = build_covariance(grid, a=12.0, kappa=1e12)
        mean = Field.constant(grid, -28.0)
        sample = sample_field(op, mean, seed=0)
        assert np.abs(sample.values - mean.values).max() < 1e-4

    def test_same_seed_reproduces(self):
        grid = Grid(4, 4, 40.0, 40.0)
        op = build_covariance(grid, a=15.0)
        mean = Field.constant(grid, 0.0)
        s1 = sample_field(op, mean, seed=42)
        s2 = sample_field(op, mean, seed=42)
        assert np.array_equal(s1.values, s2.values)

    def test_different_seeds_differ(self):
        grid = Grid(4, 4, 40.0, 40.0)
        op = build_covariance(grid, a=15.0)
        mean = Field.constant(grid, 0.0)
        assert not np.array_equal(sample_field(op, mean, 1).values,
                                  sample_field(op, mean, 2).values)

    def test_empirical_covariance_two_points(self):
        # Monte-Carlo oracle: 1e4 draws on a two-point cloud
        op = covariance_from_points([(0.0, 0.0), (5.0, 0.0)], a=10.0)
        rng = np.random.default_rng(7)
        xi = rng.standard_normal((2, 10000))
        draws = op.sqrt_apply(xi)
        emp = draws @ draws.T / draws.shape[1]
        assert np.allclose(emp, op.matrix, rtol=0.05, atol=0.05)
