"""Linearization of the forward map: finite differences and discrete adjoint.

``jacobian_adjoint`` differentiates the discrete IMPES scheme exactly:
upwind directions, the time-step sequence, and active clamps are frozen at
the base trajectory, so the assembled matrix is the true Jacobian of the
replayed (fixed-step) simulation.  ``jacobian_fd`` is the independent
oracle built from central differences of the same replayed map.

All observations are swept together: the backward recursion carries one
adjoint column per measurement, activating columns as the sweep passes
their report time, with a single pressure factorization per time node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NumericalError
from .geostat import CovarianceOperator
from .grid import Field
from .simulator import (
    ReservoirModel,
    SimulationResult,
    fractional_flow_derivative,
    mobilities,
    rel_perm_water,
    total_mobility_derivative,
    water_mobility_derivative,
)

FD_STEP_DEFAULT = 1e-6


@dataclass(frozen=True)
class SensitivityOperator:
    """Dense Jacobian of the observation map at a base log-permeability."""

    u: np.ndarray
    matrix: np.ndarray          # (n_obs, n_cells)
    provenance: str             # "adjoint" | "finite-difference"

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.ndim != 2:
            raise ConfigError("sensitivity matrix must be 2-D")
        if not np.all(np.isfinite(mat)):
            raise NumericalError("sensitivity matrix contains non-finite entries")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).copy())

    @property
    def n_obs(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_params(self) -> int:
        return self.matrix.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.matrix @ v

    def apply_adjoint(self, w: np.ndarray) -> np.ndarray:
        return self.matrix.T @ w

    def save(self, path) -> None:
        """Dump the dense matrix for offline inspection (.npy: row-major
        binary with a shape header)."""
        np.save(path, self.matrix)


def _values(model: ReservoirModel, u) -> np.ndarray:
    return u.values if isinstance(u, Field) else np.asarray(u, dtype=float)


class _BlockTriCholesky:
    """Schur-complement factorization of the banded SPD pressure matrix.

    Row-by-row cell ordering makes the matrix block tridiagonal with
    tridiagonal diagonal blocks (x couplings) and diagonal off-blocks
    (y couplings); the block Thomas recursion then serves many right-hand
    sides with dense BLAS-3 work per block row, much faster than a banded
    triangular solve per column.
    """

    def __init__(self, band: np.ndarray, nx: int, ny: int):
        self.nx, self.ny = nx, ny
        diag, sub_x, sub_y = band[0], band[1], band[nx]
        ar = np.arange(nx)
        d = np.zeros((ny, nx, nx))
        d[:, ar, ar] = diag.reshape(ny, nx)
        xs = sub_x.reshape(ny, nx)[:, :nx - 1]
        d[:, ar[1:], ar[:-1]] = xs
        d[:, ar[:-1], ar[1:]] = xs
        self._off = sub_y.reshape(ny, nx)[:ny - 1]
        self._sinv = np.empty((ny, nx, nx))
        try:
            self._sinv[0] = np.linalg.inv(d[0])
            for j in range(1, ny):
                e = self._off[j - 1]
                s = d[j] - (e[:, None] * self._sinv[j - 1]) * e[None, :]
                self._sinv[j] = np.linalg.inv(s)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"pressure block factorization failed: {exc}") from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        ny = self.ny
        blocks = b.reshape(ny, self.nx, -1)
        fwd = np.empty_like(blocks)
        fwd[0] = self._sinv[0] @ blocks[0]
        for j in range(1, ny):
            fwd[j] = self._sinv[j] @ (blocks[j] - self._off[j - 1][:, None] * fwd[j - 1])
        x = np.empty_like(blocks)
        x[ny - 1] = fwd[ny - 1]
        for j in range(ny - 2, -1, -1):
            x[j] = fwd[j] - self._sinv[j] @ (self._off[j][:, None] * x[j + 1])
        return x.reshape(b.shape)


def jacobian_fd(model: ReservoirModel, u, h: float = FD_STEP_DEFAULT,
                base: SimulationResult | None = None) -> SensitivityOperator:
    """Central-difference Jacobian replaying the base step sequence."""
    if not h > 0:
        raise ConfigError("finite-difference step must be positive")
    uv = _values(model, u)
    if base is None:
        base = model.simulate(uv)
    steps = base.dts
    mat = np.empty((model.n_obs, model.n_cells))
    for j in range(model.n_cells):
        try:
            up = uv.copy()
            up[j] += h
            obs_p = model.simulate(up, fixed_steps=steps).observations.values
            up[j] -= 2 * h
            obs_m = model.simulate(up, fixed_steps=steps).observations.values
        except NumericalError as exc:
            raise NumericalError(f"finite-difference column {j} failed: {exc}") from exc
        mat[:, j] = (obs_p - obs_m) / (2.0 * h)
    return SensitivityOperator(u=uv, matrix=mat, provenance="finite-difference")


def jacobian_adjoint(model: ReservoirModel, u,
                     base: SimulationResult | None = None) -> SensitivityOperator:
    """Exact Jacobian of the discrete scheme by one batched backward sweep.

    Per time node the sweep applies the transposed transport linearization
    (one stacked sparse operator yielding the saturation, pressure, and
    log-permeability channels at once), adds the measurement seeds at
    report nodes, and back-solves one SPD pressure system for all active
    observation columns.
    """
    uv = _values(model, u)
    if base is None or base.trajectory is None:
        base = model.simulate(uv, record_trajectory=True)
    traj = base.trajectory
    if traj is None:
        raise NumericalError("adjoint sweep requires a recorded trajectory")

    n = model.n_cells
    n_obs = model.n_obs
    fa, fb, geo = model.face_a, model.face_b, model.face_geo
    nx, ny = model.grid.nx, model.grid.ny

    K = np.exp(uv)
    ka, kb = K[fa], K[fb]
    ksum = ka + kb
    gw = geo * 2.0 * ka * kb / ksum
    # d(gw)/du at each side of the face
    gw_ua = geo * 2.0 * (kb / ksum) ** 2 * ka
    gw_ub = geo * 2.0 * (ka / ksum) ** 2 * kb

    params = model.params
    lo, hi = params.s_iw, 1.0 - params.s_or
    block = model.layout.block_size
    report_nodes = traj.report_nodes
    last = traj.s_nodes.shape[0] - 1
    pcells = model.well_cells[model.producer_idx]

    lam = np.zeros((n, n_obs))   # adjoint w.r.t. s at the current node
    grad = np.zeros((n, n_obs))  # accumulated d(obs)/du

    for k in range(last, -1, -1):
        s = traj.s_nodes[k]
        p = traj.p_nodes[k]
        interval = int(traj.node_intervals[k])
        dp = p[fa] - p[fb]
        upc = np.where(dp >= 0, fa, fb)

        r_min = int(np.searchsorted(report_nodes, k, side="left"))
        a0 = min(r_min * block, n_obs)
        width = n_obs - a0

        if k < last:
            # reverse transport step k: s^{k+1} = clip(s + c*(net + src))
            c = float(traj.dts[k]) / model.pore_vol
            lam_w = rel_perm_water(s, params) / params.mu_w
            tw = gw * lam_w[upc]
            flux = tw * dp
            net = np.bincount(fb, flux, n) - np.bincount(fa, flux, n)
            _, water_src = model.source_vector(s, interval)
            z = s + c * (net + water_src)
            mask = (z >= lo) & (z <= hi)

            lam_act = lam[:, a0:]
            v = (c * mask)[:, None] * lam_act

            # stacked transpose of d(update)/d(s, u, p): rows [0,n) -> s,
            # rows [n,2n) -> u, rows [2n,3n) -> p
            ws = gw * water_mobility_derivative(s, params)[upc] * dp
            lw_up = lam_w[upc]
            wua = gw_ua * lw_up * dp
            wub = gw_ub * lw_up * dp
            q_p = model.well_rates[model.producer_idx, interval]
            dfw_q = fractional_flow_derivative(s[pcells], params) * q_p
            rows = np.concatenate([upc, upc,
                                   fa + n, fa + n, fb + n, fb + n,
                                   fa + 2 * n, fa + 2 * n, fb + 2 * n, fb + 2 * n,
                                   pcells])
            cols = np.concatenate([fb, fa, fb, fa, fb, fa,
                                   fb, fa, fa, fb, pcells])
            vals = np.concatenate([ws, -ws, wua, -wua, wub, -wub,
                                   tw, -tw, tw, -tw, dfw_q])
            op = sp.csr_matrix((vals, (rows, cols)), shape=(3 * n, n))
            out = op @ v
            np.multiply(lam_act, mask[:, None], out=lam_act)
            lam_act += out[:n]
            grad[:, a0:] += out[n:2 * n]
            gamma_p = out[2 * n:]
        else:
            gamma_p = np.zeros((n, width))

        ridx = int(np.searchsorted(report_nodes, k))
        if ridx < report_nodes.size and report_nodes[ridx] == k:
            _add_measurement_seeds(model, ridx, s, lam, gamma_p, a0)

        if gamma_p.size and np.any(gamma_p):
            band, _, _ = model.pressure_system(uv, s, interval)
            solver = _BlockTriCholesky(band, nx, ny)
            psi = solver.solve(gamma_p - gamma_p.mean(axis=0, keepdims=True))
            if not np.all(np.isfinite(psi)):
                raise NumericalError(f"non-finite adjoint pressure state at node {k}")

            lam_t = mobilities(s, params)[1]
            m = lam_t * K
            ma, mb = m[fa], m[fb]
            msum = ma + mb
            with np.errstate(invalid="ignore", divide="ignore"):
                da_dp = np.where(msum > 0, 2.0 * geo * (mb / msum) ** 2, 0.0) * dp
                db_dp = np.where(msum > 0, 2.0 * geo * (ma / msum) ** 2, 0.0) * dp
            dlt = total_mobility_derivative(s, params)
            dsa = da_dp * dlt[fa] * K[fa]
            dsb = db_dp * dlt[fb] * K[fb]
            dua = da_dp * ma
            dub = db_dp * mb
            # stacked transpose of d(A p)/d(s, u): rows [0,n) -> s, [n,2n) -> u
            rows = np.concatenate([fa, fa, fb, fb,
                                   fa + n, fa + n, fb + n, fb + n])
            cols = np.concatenate([fa, fb, fa, fb, fa, fb, fa, fb])
            vals = np.concatenate([dsa, -dsa, dsb, -dsb, dua, -dua, dub, -dub])
            op = sp.csr_matrix((vals, (rows, cols)), shape=(2 * n, n))
            out = op @ psi
            lam[:, a0:] -= out[:n]
            grad[:, a0:] -= out[n:]

    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite adjoint gradient")
    return SensitivityOperator(u=uv, matrix=grad.T.copy(), provenance="adjoint")


def _add_measurement_seeds(model: ReservoirModel, report: int, s: np.ndarray,
                           lam: np.ndarray, gamma_p: np.ndarray, a0: int):
    """Direct derivatives of the report-time measurements w.r.t. (s, p)."""
    params = model.params
    base = report * model.layout.block_size
    q = model.well_rates[:, report]
    col = base
    for w in model.injector_idx:
        cw = model.well_cells[w]
        _, lam_t = mobilities(s[cw], params)
        dlt = total_mobility_derivative(s[cw], params)
        lam[cw, col] += -q[w] * dlt / (model.well_omega[w] * lam_t**2)
        gamma_p[cw, col - a0] += 1.0
        col += 1
    pcells = model.well_cells[model.producer_idx]
    dfw = fractional_flow_derivative(s[pcells], params)
    qp = np.abs(q[model.producer_idx])
    nprod = pcells.size
    lam[pcells, np.arange(col, col + nprod)] += dfw * qp
    lam[pcells, np.arange(col + nprod, col + 2 * nprod)] += -dfw * qp


def assemble_products(op: SensitivityOperator, cov: CovarianceOperator | np.ndarray):
    """Products C DG^T (params x obs) and DG C DG^T (obs x obs, symmetrized)."""
    dg = op.matrix
    cmat = cov.matrix if isinstance(cov, CovarianceOperator) else np.asarray(cov, dtype=float)
    if cmat.shape != (op.n_params, op.n_params):
        raise ConfigError(
            f"covariance size {cmat.shape} does not match parameter count {op.n_params}"
        )
    c_dgt = cmat @ dg.T
    dg_c_dgt = dg @ c_dgt
    return c_dgt, 0.5 * (dg_c_dgt + dg_c_dgt.T)


def directional_derivative_check(model: ReservoirModel, u, op: SensitivityOperator,
                                 v: np.ndarray, h_values=(1e-4, 1e-5, 1e-6)):
    """Taylor remainders ||G(u+hv) - G(u) - h DG v|| for each h (test helper)."""
    uv = _values(model, u)
    base = model.simulate(uv)
    g0 = base.observations.values
    dgv = op.apply(v)
    out = []
    for h in h_values:
        gh = model.simulate(uv + h * v, fixed_steps=base.dts).observations.values
        out.append(float(np.linalg.norm(gh - g0 - h * dgv)))
    return np.array(out)
