"""Geostatistical prior: spherical covariance, dense operator, sampling.

The prior covariance is ``C = C0 / kappa`` where ``C0`` comes from the
spherical model with range ``a`` evaluated between cell centers, optionally
through an anisotropy map (rotation plus axis scaling).  The operator is
stored densely with a symmetric eigenfactorization, which is exact and
fast enough for desk-scale grids (up to roughly 128 x 128 cells).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericalError
from .grid import Field, Grid

# Eigenvalues are accepted down to -PSD_TOL * trace before the matrix is
# declared indefinite; roundoff on large grids produces tiny negatives.
PSD_TOL = 1e-10


def anisotropy_matrix(theta: float = 0.0, axis_ratio: float = 1.0) -> np.ndarray:
    """2x2 map applied to separation vectors before taking their length.

    ``theta`` (radians) rotates into the direction of maximum continuity;
    ``axis_ratio`` stretches the second axis, shortening the effective
    range across it.  The default is isotropic.
    """
    if axis_ratio <= 0:
        raise ConfigError("axis_ratio must be positive")
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, s], [-s, c]])
    return np.diag([1.0, axis_ratio]) @ rot


def spherical_cov(z1, z2, a: float, M: np.ndarray | None = None) -> float:
    """Spherical covariance between two points.

    Returns ``1 - 1.5*h/a + 0.5*(h/a)**3`` for ``h < a`` and 0 otherwise,
    where ``h`` is the (possibly anisotropically mapped) separation length.
    """
    if a <= 0:
        raise ConfigError("covariance range must be positive")
    d = np.asarray(z1, dtype=float) - np.asarray(z2, dtype=float)
    if M is not None:
        d = np.asarray(M) @ d
    h = float(np.hypot(d[0], d[1]))
    if h >= a:
        return 0.0
    r = h / a
    return 1.0 - 1.5 * r + 0.5 * r**3


def _spherical_matrix(x: np.ndarray, y: np.ndarray, a: float, M: np.ndarray) -> np.ndarray:
    pts = np.column_stack([x, y]) @ np.asarray(M).T
    dx = pts[:, None, 0] - pts[None, :, 0]
    dy = pts[:, None, 1] - pts[None, :, 1]
    r = np.hypot(dx, dy) / a
    c = np.where(r < 1.0, 1.0 - 1.5 * r + 0.5 * r**3, 0.0)
    return 0.5 * (c + c.T)


class CovarianceOperator:
    """Dense prior covariance with apply, square-root apply, and sampling.

    Parameters
    ----------
    grid : Grid or None
        Grid whose cell centers carry the field; None for point-cloud use.
    matrix : ndarray
        Dense symmetric covariance, already scaled by 1/kappa.
    kappa : float
        Overall inverse scaling, kept for bookkeeping.
    """

    def __init__(self, grid: Grid | None, matrix: np.ndarray, kappa: float = 1.0,
                 a: float = np.nan, theta: float = 0.0, axis_ratio: float = 1.0):
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ConfigError("covariance matrix must be square")
        if grid is not None and matrix.shape[0] != grid.n_cells:
            raise ConfigError("covariance size does not match grid")
        if not np.allclose(matrix, matrix.T, rtol=0, atol=1e-12 * max(1.0, abs(matrix).max())):
            raise ConfigError("covariance matrix must be symmetric")
        self.grid = grid
        self.kappa = float(kappa)
        self.a = float(a)
        self.theta = float(theta)
        self.axis_ratio = float(axis_ratio)
        self.matrix = 0.5 * (matrix + matrix.T)
        self._eigvals, self._eigvecs = np.linalg.eigh(self.matrix)
        tr = float(np.trace(self.matrix))
        if self._eigvals.min() < -PSD_TOL * max(tr, np.finfo(float).tiny):
            raise NumericalError(
                f"covariance is indefinite: min eigenvalue {self._eigvals.min():.3e} "
                f"vs trace {tr:.3e} (bad range/grid combination?)"
            )
        self._sqrt_vals = np.sqrt(np.clip(self._eigvals, 0.0, None))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Dense product C @ v."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ConfigError(f"vector length {v.shape[0]} != operator size {self.n}")
        return self.matrix @ v

    def sqrt_apply(self, xi: np.ndarray) -> np.ndarray:
        """Apply a factor S with S @ S.T == C to white noise."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[0] != self.n:
            raise ConfigError(f"vector length {xi.shape[0]} != operator size {self.n}")
        return self._eigvecs @ (self._sqrt_vals * xi.T).T if xi.ndim > 1 else \
            self._eigvecs @ (self._sqrt_vals * xi)

    def inv_norm_sq(self, v: np.ndarray, floor: float = 1e-14) -> float:
        """Squared prior norm ||C^{-1/2} v||^2 via the eigenfactors.

        Eigenvalues below ``floor`` times the largest are rejected: the
        matrix is then numerically rank-deficient for this purpose.
        """
        v = np.asarray(v, dtype=float)
        w = self._eigvecs.T @ v
        lam = self._eigvals
        cut = floor * lam.max()
        if lam.min() < cut:
            raise NumericalError(
                "covariance too ill-conditioned for C^{-1/2} norm "
                f"(min/max eigenvalue {lam.min():.3e}/{lam.max():.3e})"
            )
        return float(np.sum(w**2 / lam))

    def scaled(self, kappa: float) -> "CovarianceOperator":
        """Same correlation structure with a different overall 1/kappa scale."""
        if kappa <= 0:
            raise ConfigError("kappa must be positive")
        ratio = self.kappa / kappa
        op = object.__new__(CovarianceOperator)
        op.grid = self.grid
        op.kappa = float(kappa)
        op.a, op.theta, op.axis_ratio = self.a, self.theta, self.axis_ratio
        op.matrix = self.matrix * ratio
        op._eigvals = self._eigvals * ratio
        op._eigvecs = self._eigvecs
        op._sqrt_vals = self._sqrt_vals * np.sqrt(ratio)
        return op


def build_covariance(grid: Grid, a: float, theta: float = 0.0,
                     axis_ratio: float = 1.0, kappa: float = 1.0) -> CovarianceOperator:
    """Assemble C = C0 / kappa from the spherical model on cell centers."""
    if kappa <= 0:
        raise ConfigError("kappa must be positive")
    if a <= 0:
        raise ConfigError("covariance range must be positive")
    M = anisotropy_matrix(theta, axis_ratio)
    x, y = grid.cell_centers()
    c0 = _spherical_matrix(x, y, a, M)
    return CovarianceOperator(grid, c0 / kappa, kappa=kappa, a=a,
                              theta=theta, axis_ratio=axis_ratio)


def covariance_from_points(points, a: float, theta: float = 0.0,
                           axis_ratio: float = 1.0, kappa: float = 1.0) -> CovarianceOperator:
    """Spherical covariance operator on an explicit point cloud (for small tests)."""
    pts = np.asarray(points, dtype=float)
    M = anisotropy_matrix(theta, axis_ratio)
    c0 = _spherical_matrix(pts[:, 0], pts[:, 1], a, M)
    return CovarianceOperator(None, c0 / kappa, kappa=kappa, a=a,
                              theta=theta, axis_ratio=axis_ratio)


def sample_field(op: CovarianceOperator, mean: Field, seed) -> Field:
    """Draw mean + S xi with S S^T = C; deterministic for a given seed."""
    if op.grid is None:
        raise ConfigError("sampling a Field requires a grid-based operator")
    if mean.grid.n_cells != op.n:
        raise ConfigError("mean field does not match operator grid")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(op.n)
    return Field(op.grid, mean.values + op.sqrt_apply(xi))
