import numpy as np
import pytest
from scipy.linalg import cho_solve_banded, cholesky_banded

from resinv.errors import ConfigError, NumericalError
from resinv.geostat import build_covariance, covariance_from_points
from resinv.grid import Grid
from resinv.sensitivity import (
    SensitivityOperator,
    _BlockTriCholesky,
    assemble_products,
    directional_derivative_check,
    jacobian_adjoint,
    jacobian_fd,
)

from conftest import MEAN_LOG_PERM, LinearModel, two_well_model


@pytest.fixture(scope="module")
def desk_jacobians(small_model, small_heterogeneous_u):
    base = small_model.simulate(small_heterogeneous_u, record_trajectory=True)
    adj = jacobian_adjoint(small_model, small_heterogeneous_u, base=base)
    fd = jacobian_fd(small_model, small_heterogeneous_u, h=1e-6, base=base)
    return adj, fd


# Fixtures from conftest are declared at session scope; re-export for clarity.
small_model = pytest.fixture(scope="module")(lambda: two_well_model())


@pytest.fixture(scope="module")
def small_heterogeneous_u(small_model):
    rng = np.random.default_rng(3)
    return MEAN_LOG_PERM + 0.5 * rng.standard_normal(small_model.n_cells)


class TestBlockSolver:
    def test_matches_banded_cholesky(self, small_model, small_heterogeneous_u):
        s = np.full(small_model.n_cells, 0.37)
        band, b, _ = small_model.pressure_system(small_heterogeneous_u, s, 0)
        cb = cholesky_banded(band, lower=True)
        rng = np.random.default_rng(0)
        B = rng.standard_normal((small_model.n_cells, 7))
        ref = cho_solve_banded((cb, True), B)
        got = _BlockTriCholesky(band, small_model.grid.nx, small_model.grid.ny).solve(B)
        assert np.allclose(got, ref, rtol=1e-11, atol=1e-11 * np.abs(ref).max())

    def test_single_vector_shape(self, small_model, small_heterogeneous_u):
        s = np.full(small_model.n_cells, 0.37)
        band, b, _ = small_model.pressure_system(small_heterogeneous_u, s, 0)
        solver = _BlockTriCholesky(band, small_model.grid.nx, small_model.grid.ny)
        x = solver.solve(b)
        assert x.shape == b.shape


class TestFiniteDifference:
    def test_linear_map_recovered_exactly(self):
        rng = np.random.default_rng(1)
        B = rng.standard_normal((4, 6))
        model = LinearModel(B)
        op = jacobian_fd(model, np.zeros(6), h=1e-3)
        assert np.allclose(op.matrix, B, rtol=1e-10, atol=1e-10)
        assert op.provenance == "finite-difference"

    def test_nonpositive_step_rejected(self):
        model = LinearModel(np.eye(2))
        with pytest.raises(ConfigError):
            jacobian_fd(model, np.zeros(2), h=0.0)

    def test_step_halving_consistency(self, small_model, small_heterogeneous_u):
        # h=1e-7 sits near the roundoff floor on the weakest columns, so the
        # self-consistency is asserted at matrix level
        base = small_model.simulate(small_heterogeneous_u)
        f6 = jacobian_fd(small_model, small_heterogeneous_u, h=1e-6, base=base).matrix
        f7 = jacobian_fd(small_model, small_heterogeneous_u, h=1e-7, base=base).matrix
        rel = np.linalg.norm(f6 - f7) / np.linalg.norm(f6)
        assert rel <= 1e-3


class TestAdjoint:
    def test_matches_fd_columns(self, desk_jacobians):
        adj, fd = desk_jacobians
        scale = np.abs(fd.matrix).max()
        worst = 0.0
        for j in range(adj.n_params):
            denom = np.linalg.norm(fd.matrix[:, j]) + 1e-12 * scale
            worst = max(worst, np.linalg.norm(adj.matrix[:, j] - fd.matrix[:, j]) / denom)
        assert worst <= 1e-3

    def test_adjoint_identity(self, desk_jacobians):
        adj, _ = desk_jacobians
        rng = np.random.default_rng(2)
        for _ in range(10):
            v = rng.standard_normal(adj.n_params)
            w = rng.standard_normal(adj.n_obs)
            lhs = w @ adj.apply(v)
            rhs = adj.apply_adjoint(w) @ v
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))

    def test_quiet_well_schedule_gives_negligible_jacobian(self):
        model = two_well_model(nx=4, ny=4, rate=1e-30, t_end=1e6, n_reports=2,
                               max_dt=1e5)
        u = np.full(model.n_cells, MEAN_LOG_PERM)
        adj = jacobian_adjoint(model, u)
        # observation scale is p0 ~ 2.5e7 Pa; sensitivities vanish with the rates
        assert np.abs(adj.matrix).max() < 1e-12
        fd = jacobian_fd(model, u, h=1e-6)
        assert np.abs(fd.matrix).max() < 1e-6  # limited by p0-scale cancellation

    def test_taylor_remainder_second_order(self, small_model, small_heterogeneous_u):
        adj = jacobian_adjoint(small_model, small_heterogeneous_u)
        rng = np.random.default_rng(4)
        v = rng.standard_normal(small_model.n_cells)
        v /= np.linalg.norm(v)
        remainders = directional_derivative_check(
            small_model, small_heterogeneous_u, adj, v, h_values=(1e-4, 1e-5, 1e-6))
        # successive h-halving by 10 must shrink the remainder ~100x
        assert remainders[0] / remainders[1] == pytest.approx(100.0, rel=0.7)
        assert remainders[1] / remainders[2] == pytest.approx(100.0, rel=0.7)

    def test_provenance_tag(self, desk_jacobians):
        adj, fd = desk_jacobians
        assert adj.provenance == "adjoint"
        assert fd.provenance == "finite-difference"

    def test_nonfinite_matrix_rejected(self):
        with pytest.raises(NumericalError):
            SensitivityOperator(u=np.zeros(2), matrix=np.array([[np.nan, 0.0]]),
                                provenance="adjoint")

    def test_matrix_dump_round_trips(self, tmp_path):
        rng = np.random.default_rng(8)
        op = SensitivityOperator(u=np.zeros(3), matrix=rng.standard_normal((2, 3)),
                                 provenance="adjoint")
        path = tmp_path / "jacobian.npy"
        op.save(path)
        assert np.array_equal(np.load(path), op.matrix)


class TestAssembleProducts:
    def test_zero_jacobian_gives_zero_products(self):
        grid = Grid(3, 3, 30.0, 30.0)
        cov = build_covariance(grid, a=12.0)
        op = SensitivityOperator(u=np.zeros(9), matrix=np.zeros((4, 9)),
                                 provenance="adjoint")
        c_dgt, dg_c_dgt = assemble_products(op, cov)
        assert np.all(c_dgt == 0.0) and np.all(dg_c_dgt == 0.0)

    def test_identity_covariance(self):
        grid = Grid(3, 3, 30.0, 30.0)
        cov = build_covariance(grid, a=5.0, kappa=1.0)  # range below cell spacing
        rng = np.random.default_rng(5)
        dg = rng.standard_normal((4, 9))
        op = SensitivityOperator(u=np.zeros(9), matrix=dg, provenance="adjoint")
        _, dg_c_dgt = assemble_products(op, cov)
        assert np.allclose(dg_c_dgt, dg @ dg.T, rtol=1e-13)

    def test_matches_dense_triple_product(self):
        pts = [(float(i), 0.0) for i in range(5)]
        cov = covariance_from_points(pts, a=3.0, kappa=2.0)
        rng = np.random.default_rng(6)
        dg = rng.standard_normal((3, 5))
        op = SensitivityOperator(u=np.zeros(5), matrix=dg, provenance="adjoint")
        c_dgt, dg_c_dgt = assemble_products(op, cov)
        assert np.allclose(c_dgt, cov.matrix @ dg.T, rtol=1e-12)
        assert np.allclose(dg_c_dgt, dg @ cov.matrix @ dg.T, rtol=1e-12)

    def test_product_is_positive_semidefinite(self, desk_jacobians, small_model):
        adj, _ = desk_jacobians
        cov = build_covariance(small_model.grid, a=500.0)
        _, dg_c_dgt = assemble_products(adj, cov)
        w = np.linalg.eigvalsh(dg_c_dgt)
        assert w.min() >= -1e-10 * np.trace(dg_c_dgt)

    def test_shape_mismatch_rejected(self):
        grid = Grid(3, 3, 30.0, 30.0)
        cov = build_covariance(grid, a=12.0)
        op = SensitivityOperator(u=np.zeros(4), matrix=np.zeros((2, 4)),
                                 provenance="adjoint")
        with pytest.raises(ConfigError):
            assemble_products(op, cov)
