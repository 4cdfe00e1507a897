"""Incompressible oil-water flow by IMPES and the well measurement map.

Pressure is solved implicitly per step by a two-point flux finite volume
scheme with harmonic-mean face transmissibilities of ``lambda(s) * exp(u)``
and no-flow boundaries; the Neumann null space is removed by a symmetric
rank-one grounding (which pins cell 0 exactly without perturbing the
solution) followed by a shift of the mean to the initial pressure.
Saturation is advanced explicitly with upwind water mobility.  At each
report time the Peaceman bottom-hole pressure at injectors and the
water/oil rate split at producers are stacked into the observation vector.

The scheme is deliberately deterministic in its step sequence: a recorded
sequence of time steps can be replayed (``fixed_steps``) so that finite
differences and the discrete adjoint differentiate the same smooth map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded

from .errors import ConfigError, NumericalError
from .grid import (
    INJECTOR,
    PRODUCER,
    THICKNESS,
    Field,
    Grid,
    PhysicalParams,
    Schedule,
    WellSpec,
    cell_of,
)

CFL_FACTOR = 0.5
PRESSURE_RTOL = 1e-10
RATE_BALANCE_RTOL = 1e-12
MAX_STEPS = 100_000  # guards runs whose CFL limit collapsed on degenerate fields

KIND_BHP = "bhp"
KIND_WATER_RATE = "water_rate"
KIND_OIL_RATE = "oil_rate"


# ---------------------------------------------------------------------------
# Rock-fluid functions (vectorized; saturations clamped to the movable range)

def rel_perm_water(s, params: PhysicalParams):
    x = np.clip((np.asarray(s, dtype=float) - params.s_iw) / params.movable_range, 0.0, 1.0)
    return params.a_w * x**2


def rel_perm_oil(s, params: PhysicalParams):
    x = np.clip((1.0 - np.asarray(s, dtype=float) - params.s_or) / params.movable_range, 0.0, 1.0)
    return params.a_o * x**2


def mobilities(s, params: PhysicalParams):
    """Water and total mobility (Pa^-1 s^-1)."""
    lam_w = rel_perm_water(s, params) / params.mu_w
    lam_t = rel_perm_oil(s, params) / params.mu_o + lam_w
    return lam_w, lam_t


def water_mobility_derivative(s, params: PhysicalParams):
    x = (np.asarray(s, dtype=float) - params.s_iw) / params.movable_range
    inside = (x > 0.0) & (x < 1.0)
    return np.where(inside, 2.0 * params.a_w * np.clip(x, 0, 1), 0.0) / (
        params.movable_range * params.mu_w
    )


def total_mobility_derivative(s, params: PhysicalParams):
    x = (np.asarray(s, dtype=float) - params.s_iw) / params.movable_range
    xo = (1.0 - np.asarray(s, dtype=float) - params.s_or) / params.movable_range
    dw = np.where((x > 0) & (x < 1), 2.0 * params.a_w * np.clip(x, 0, 1), 0.0) / (
        params.movable_range * params.mu_w
    )
    do = np.where((xo > 0) & (xo < 1), -2.0 * params.a_o * np.clip(xo, 0, 1), 0.0) / (
        params.movable_range * params.mu_o
    )
    return dw + do


def fractional_flow(s, params: PhysicalParams):
    lam_w, lam_t = mobilities(s, params)
    return lam_w / lam_t


def fractional_flow_derivative(s, params: PhysicalParams):
    lam_w, lam_t = mobilities(s, params)
    dlw = water_mobility_derivative(s, params)
    dlt = total_mobility_derivative(s, params)
    return (dlw * lam_t - lam_w * dlt) / lam_t**2


# ---------------------------------------------------------------------------
# Observations

@dataclass(frozen=True)
class ObservationLayout:
    """Static index of the stacked measurement vector.

    Per report time the block order is: BHP at each injector, water rate at
    each producer, oil rate at each producer.  Rates are reported as
    positive magnitudes so that water + oil always equals the total well
    rate.
    """

    times: np.ndarray      # (N,) report time of each entry (s)
    well_names: tuple      # (N,)
    kinds: tuple           # (N,) one of bhp / water_rate / oil_rate
    report_times: np.ndarray
    block_size: int

    @property
    def n(self) -> int:
        return self.times.size

    def mask(self, kind: str | None = None, well: str | None = None) -> np.ndarray:
        m = np.ones(self.n, dtype=bool)
        if kind is not None:
            m &= np.array([k == kind for k in self.kinds])
        if well is not None:
            m &= np.array([w == well for w in self.well_names])
        return m


@dataclass(frozen=True)
class ObservationVector:
    """Stacked well measurements with layout metadata."""

    layout: ObservationLayout
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.layout.n,):
            raise ConfigError("observation values do not match layout size")
        if not np.all(np.isfinite(vals)):
            raise NumericalError("observation vector contains non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def n(self) -> int:
        return self.layout.n

    def with_values(self, values) -> "ObservationVector":
        return ObservationVector(self.layout, np.asarray(values, dtype=float))


@dataclass
class Trajectory:
    """Stored IMPES trajectory for adjoint sweeps and state dumps."""

    s_nodes: np.ndarray        # (K+1, P) saturation at each node
    p_nodes: np.ndarray        # (K+1, P) pressure at each node
    node_times: np.ndarray     # (K+1,)
    dts: np.ndarray            # (K,)
    node_intervals: np.ndarray  # (K+1,) rate interval used at each node
    report_nodes: np.ndarray   # (R,) node index of each report time

    @property
    def n_steps(self) -> int:
        return self.dts.size


@dataclass
class SimulationResult:
    observations: ObservationVector
    dts: np.ndarray
    trajectory: Trajectory | None = None
    max_preclamp_overshoot: float = 0.0


class ReservoirModel:
    """Immutable bundle of grid, wells, physics, and schedule.

    ``simulate`` is a pure function of the log-permeability field; several
    simulations may run concurrently on one model instance.
    """

    def __init__(self, grid: Grid, wells, params: PhysicalParams, schedule: Schedule):
        self.grid = grid
        self.params = params
        self.schedule = schedule
        self.wells = tuple(wells)
        if not self.wells:
            raise ConfigError("at least one well is required")
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise ConfigError("well names must be unique")

        nx, ny, n = grid.nx, grid.ny, grid.n_cells
        # Face topology: x-faces pair (c, c+1), y-faces pair (c, c+nx).
        jj, ii = np.meshgrid(np.arange(ny), np.arange(nx - 1), indexing="ij")
        ax = (jj * nx + ii).ravel()
        jj, ii = np.meshgrid(np.arange(ny - 1), np.arange(nx), indexing="ij")
        ay = (jj * nx + ii).ravel()
        self.face_a = np.concatenate([ax, ay + 0])
        self.face_b = np.concatenate([ax + 1, ay + nx])
        geo_x = np.full(ax.size, grid.dy * THICKNESS / grid.dx)
        geo_y = np.full(ay.size, grid.dx * THICKNESS / grid.dy)
        self.face_geo = np.concatenate([geo_x, geo_y])
        self.n_faces = self.face_a.size

        phi = np.broadcast_to(np.asarray(params.porosity, dtype=float), (n,)).copy()
        self.pore_vol = phi * grid.cell_area * THICKNESS

        # Wells: cells, kinds, rate table (n_wells x n_reports).
        R = schedule.n_reports
        cells, rates = [], []
        for w in self.wells:
            i, j = cell_of(grid, (w.x, w.y))
            cells.append(grid.flat_index(i, j))
            r = w.rates if w.rates.size == R else None
            if r is None:
                if w.rates.size != 1:
                    raise ConfigError(
                        f"well {w.name}: rate schedule must have 1 or {R} entries"
                    )
                r = np.full(R, w.rates[0])
            rates.append(r)
        self.well_cells = np.array(cells, dtype=int)
        self.well_rates = np.array(rates, dtype=float)  # (n_wells, R)
        self.well_omega = np.array([w.well_index for w in self.wells])
        self.is_injector = np.array([w.kind == INJECTOR for w in self.wells])
        self.injector_idx = np.flatnonzero(self.is_injector)
        self.producer_idx = np.flatnonzero(~self.is_injector)
        if len(set(self.well_cells.tolist())) != len(self.wells):
            raise ConfigError("two wells share a grid cell")

        for r in range(R):
            q = self.well_rates[:, r]
            scale = np.abs(q).sum()
            if scale > 0 and abs(q.sum()) > RATE_BALANCE_RTOL * scale:
                raise ConfigError(
                    f"well rates do not balance in report interval {r}: "
                    f"sum {q.sum():.3e} vs scale {scale:.3e}"
                )

        self._layout = self._build_layout()

    # -- observation layout -------------------------------------------------

    def _build_layout(self) -> ObservationLayout:
        inj = [self.wells[i].name for i in self.injector_idx]
        prod = [self.wells[i].name for i in self.producer_idx]
        block = inj + prod + prod
        kinds_block = ([KIND_BHP] * len(inj) + [KIND_WATER_RATE] * len(prod)
                       + [KIND_OIL_RATE] * len(prod))
        rt = self.schedule.report_times
        times = np.repeat(rt, len(block))
        names = tuple(block) * rt.size
        kinds = tuple(kinds_block) * rt.size
        return ObservationLayout(times=times, well_names=names, kinds=kinds,
                                 report_times=rt.copy(), block_size=len(block))

    @property
    def layout(self) -> ObservationLayout:
        return self._layout

    @property
    def n_obs(self) -> int:
        return self._layout.n

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    # -- low-level pieces ----------------------------------------------------

    def _as_values(self, u) -> np.ndarray:
        vals = u.values if isinstance(u, Field) else np.asarray(u, dtype=float)
        if vals.shape != (self.grid.n_cells,):
            raise ConfigError("log-permeability length does not match grid")
        if not np.all(np.isfinite(vals)):
            raise ConfigError("log-permeability contains non-finite values")
        return vals

    def _perm_face_trans(self, K: np.ndarray) -> np.ndarray:
        """Geometric transmissibility with harmonic permeability (no mobility)."""
        ka, kb = K[self.face_a], K[self.face_b]
        denom = ka + kb
        with np.errstate(invalid="ignore", divide="ignore"):
            harm = np.where(denom > 0, 2.0 * ka * kb / denom, 0.0)
        return self.face_geo * harm

    def interval_at(self, t: float) -> int:
        """Rate interval active for a step starting at time t."""
        r = int(np.searchsorted(self.schedule.report_times, t, side="right"))
        return min(r, self.schedule.n_reports - 1)

    def source_vector(self, s: np.ndarray, interval: int):
        """Total source b (for pressure) and water source (for transport)."""
        q = self.well_rates[:, interval]
        b = np.zeros(self.grid.n_cells)
        np.add.at(b, self.well_cells, q)
        water = np.zeros(self.grid.n_cells)
        qi = np.where(self.is_injector, q, 0.0)
        np.add.at(water, self.well_cells, qi)
        pcells = self.well_cells[self.producer_idx]
        fw = fractional_flow(s[pcells], self.params)
        np.add.at(water, pcells, fw * q[self.producer_idx])
        return b, water

    def pressure_system(self, u, s, interval: int = 0):
        """Banded SPD pressure matrix (lower form) and right-hand side."""
        uv = self._as_values(u)
        sv = s.values if isinstance(s, Field) else np.asarray(s, dtype=float)
        K = np.exp(uv)
        _, lam_t = mobilities(sv, self.params)
        m = lam_t * K
        ma, mb = m[self.face_a], m[self.face_b]
        denom = ma + mb
        with np.errstate(invalid="ignore", divide="ignore"):
            T = np.where(denom > 0, self.face_geo * 2.0 * ma * mb / denom, 0.0)
        n = self.grid.n_cells
        diag = np.bincount(self.face_a, T, n) + np.bincount(self.face_b, T, n)
        band = np.zeros((self.grid.nx + 1, n))
        band[0] = diag
        nxf = self.grid.ny * (self.grid.nx - 1)  # x-faces listed first
        band[1, self.face_a[:nxf]] = -T[:nxf]
        band[self.grid.nx, self.face_a[nxf:]] = -T[nxf:]
        ground = diag.mean()
        if not ground > 0:
            raise NumericalError("pressure system is singular: all mobilities vanish")
        band[0, 0] += ground
        b, _ = self.source_vector(sv, interval)
        return band, b, T

    def solve_pressure(self, u, s, interval: int = 0):
        """Pressure field for the current saturation; mean pinned to p0.

        The grounded SPD system yields the exact Neumann solution with
        p[0] = 0 (compatibility makes the grounding term vanish); the
        result is then shifted so its mean equals the initial pressure.
        """
        band, b, T = self.pressure_system(u, s, interval)
        scale = np.abs(b).sum()
        if scale > 0 and abs(b.sum()) > RATE_BALANCE_RTOL * scale:
            raise NumericalError("well rates do not balance: pressure system incompatible")
        try:
            cb = cholesky_banded(band, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"pressure system factorization failed: {exc}") from exc
        ground = band[0, 0] - (np.bincount(self.face_a, T, b.size)
                               + np.bincount(self.face_b, T, b.size))[0]
        p_raw = cho_solve_banded((cb, True), b)
        ref = np.linalg.norm(b)
        resid = np.inf
        tol = 0.0
        # Iterative refinement recovers the residual tolerance on strongly
        # contrasted permeability fields; beyond that, the attainable
        # accuracy of a backward-stable solve is eps * ||A|| * ||p||, which
        # floors the check (inactive for well-scaled systems).
        for _ in range(3):
            flux = T * (p_raw[self.face_a] - p_raw[self.face_b])
            div = (np.bincount(self.face_a, flux, b.size)
                   - np.bincount(self.face_b, flux, b.size))
            r = b - div
            r[0] -= ground * p_raw[0]
            resid = np.linalg.norm(div - b)
            floor = np.finfo(float).eps * band[0].max() * np.linalg.norm(p_raw)
            tol = max(PRESSURE_RTOL * ref, floor)
            if ref == 0 or resid <= tol:
                break
            p_raw = p_raw + cho_solve_banded((cb, True), r)
        if ref > 0 and resid > tol:
            raise NumericalError(
                f"pressure solve residual {resid:.3e} exceeds tolerance {tol:.3e} "
                f"(= max({PRESSURE_RTOL:.0e} * ||b||, attainable accuracy))"
            )
        p = p_raw + (self.params.p0 - p_raw.mean())
        if isinstance(u, Field) or isinstance(s, Field):
            return Field(self.grid, p)
        return p

    def _face_upwind(self, p: np.ndarray):
        dp = p[self.face_a] - p[self.face_b]
        up = np.where(dp >= 0, self.face_a, self.face_b)
        return dp, up

    def stable_dt(self, u, s, p, interval: int = 0) -> float:
        """Largest time step honoring the explicit-transport CFL rule."""
        uv = self._as_values(u)
        sv = s.values if isinstance(s, Field) else np.asarray(s, dtype=float)
        pv = p.values if isinstance(p, Field) else np.asarray(p, dtype=float)
        gw = self._perm_face_trans(np.exp(uv))
        return self._stable_dt(sv, pv, gw, interval)

    def _stable_dt(self, s, p, gw, interval: int) -> float:
        dp, up = self._face_upwind(p)
        out_coef = np.bincount(up, gw * np.abs(dp), self.grid.n_cells)
        D = water_mobility_derivative(s, self.params) * out_coef
        pcells = self.well_cells[self.producer_idx]
        q_p = self.well_rates[self.producer_idx, interval]
        dfw = fractional_flow_derivative(s[pcells], self.params)
        np.add.at(D, pcells, dfw * np.abs(q_p))
        dmax = D.max(initial=0.0)
        if dmax <= 0:
            return np.inf
        active = D > 0
        return CFL_FACTOR * float(np.min(self.pore_vol[active] / D[active]))

    def advance_saturation(self, u, p, s, dt: float, interval: int = 0):
        """One explicit upwind transport step, clamped to the movable range."""
        uv = self._as_values(u)
        sv = s.values if isinstance(s, Field) else np.asarray(s, dtype=float)
        pvals = p.values if isinstance(p, Field) else np.asarray(p, dtype=float)
        gw = self._perm_face_trans(np.exp(uv))
        hard = self._stable_dt(sv, pvals, gw, interval) / CFL_FACTOR
        if dt > 1.05 * hard:
            raise NumericalError(
                f"time step {dt:.3e} s violates the CFL bound {hard:.3e} s"
            )
        s_new, _ = self._advance(sv, pvals, gw, dt, interval)
        if isinstance(s, Field):
            return Field(self.grid, s_new)
        return s_new

    def _advance(self, s, p, gw, dt, interval: int):
        dp, up = self._face_upwind(p)
        lam_w = rel_perm_water(s, self.params) / self.params.mu_w
        flux = gw * lam_w[up] * dp  # water flux from face_a to face_b
        n = self.grid.n_cells
        net = np.bincount(self.face_b, flux, n) - np.bincount(self.face_a, flux, n)
        _, water_src = self.source_vector(s, interval)
        z = s + (dt / self.pore_vol) * (net + water_src)
        lo, hi = self.params.s_iw, 1.0 - self.params.s_or
        overshoot = max(float((lo - z).max(initial=0.0)), float((z - hi).max(initial=0.0)))
        return np.clip(z, lo, hi), overshoot

    # -- time stepping -------------------------------------------------------

    def simulate(self, u, fixed_steps=None, record_trajectory: bool = False) -> SimulationResult:
        """Run the IMPES loop and evaluate all report-time measurements.

        With ``fixed_steps`` the recorded step sequence of a previous run is
        replayed verbatim, which freezes the time discretization across
        nearby parameter fields (used by finite differences and adjoints).
        """
        uv = self._as_values(u)
        K = np.exp(uv)
        gw = self._perm_face_trans(K)
        n = self.grid.n_cells
        rt = self.schedule.report_times
        t_stop = rt[-1]

        s = np.full(n, float(self.params.s0))
        t = 0.0
        next_report = 0
        obs = np.empty(self.n_obs)
        dts, s_nodes, p_nodes, node_times, node_intervals, report_nodes = \
            [], [], [], [], [], []
        max_overshoot = 0.0
        step_count = 0

        while True:
            interval = self.interval_at(t)
            p = self.solve_pressure(uv, s, interval)
            if record_trajectory:
                s_nodes.append(s.copy())
                p_nodes.append(p.copy())
                node_times.append(t)
                node_intervals.append(interval)
            if next_report < rt.size and t >= rt[next_report] * (1.0 - 1e-12):
                self._measure(obs, next_report, s, p)
                if record_trajectory:
                    report_nodes.append(len(s_nodes) - 1)
                next_report += 1
            if next_report >= rt.size or t >= t_stop * (1.0 - 1e-12):
                break

            if fixed_steps is not None:
                if step_count >= len(fixed_steps):
                    raise NumericalError("fixed step sequence exhausted before final report")
                dt = float(fixed_steps[step_count])
            else:
                dt = min(self.schedule.max_dt, self._stable_dt(s, p, gw, interval))
                remaining = rt[next_report] - t
                if dt >= remaining * (1.0 - 1e-12):
                    dt = remaining
            if not dt > 0:
                raise NumericalError(f"non-positive time step at t={t:.6e}")
            if step_count >= MAX_STEPS:
                raise NumericalError(
                    f"step budget {MAX_STEPS} exhausted at t={t:.6e} "
                    f"(dt collapsed to {dt:.3e} s)"
                )
            s, overshoot = self._advance(s, p, gw, dt, interval)
            max_overshoot = max(max_overshoot, overshoot)
            if not np.all(np.isfinite(s)):
                raise NumericalError(f"non-finite saturation at t={t:.6e} (step {step_count})")
            t = t + dt
            if next_report < rt.size and abs(t - rt[next_report]) <= 1e-9 * rt[next_report]:
                t = float(rt[next_report])
            dts.append(dt)
            step_count += 1

        traj = None
        if record_trajectory:
            traj = Trajectory(
                s_nodes=np.array(s_nodes),
                p_nodes=np.array(p_nodes),
                node_times=np.array(node_times),
                dts=np.array(dts),
                node_intervals=np.array(node_intervals, dtype=int),
                report_nodes=np.array(report_nodes, dtype=int),
            )
        observations = ObservationVector(self._layout, obs)
        return SimulationResult(observations=observations, dts=np.array(dts),
                                trajectory=traj, max_preclamp_overshoot=max_overshoot)

    def _measure(self, out: np.ndarray, report: int, s: np.ndarray, p: np.ndarray):
        """Fill the observation block for one report time.

        Rates use the schedule value of the interval ending at the report
        time; the pressure field is the instantaneous one at that node.
        """
        base = report * self._layout.block_size
        q = self.well_rates[:, report]
        k = base
        for w in self.injector_idx:
            c = self.well_cells[w]
            _, lam_t = mobilities(s[c], self.params)
            out[k] = q[w] / (self.well_omega[w] * lam_t) + p[c]
            k += 1
        pcells = self.well_cells[self.producer_idx]
        fw = fractional_flow(s[pcells], self.params)
        qp = np.abs(q[self.producer_idx])
        nprod = pcells.size
        out[k:k + nprod] = fw * qp
        out[k + nprod:k + 2 * nprod] = (1.0 - fw) * qp
