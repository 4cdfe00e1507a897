"""Reservoir grid, fields, wells, schedule, and physical constants.

Cells are indexed by ``(i, j)`` with ``i`` along x and ``j`` along y;
flat index is ``j * nx + i``.  The model is two-dimensional with an
implicit unit thickness of 1 m: all volumetric rates are per metre of
thickness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OutsideDomainError

THICKNESS = 1.0                 # implicit 2D thickness (m)
DARCY_M2 = 9.869233e-13         # 1 darcy in m^2
MILLIDARCY_M2 = 1e-3 * DARCY_M2
YEAR_SECONDS = 365.0 * 86400.0
DAY_SECONDS = 86400.0
M3S_TO_BBL_PER_DAY = 543439.65  # reporting-layer conversion for rates


@dataclass(frozen=True)
class Grid:
    """Uniform rectangular cell grid on [0, Lx] x [0, Ly]."""

    nx: int
    ny: int
    Lx: float
    Ly: float

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid must be at least 2x2, got {self.nx}x{self.ny}")
        if self.Lx <= 0 or self.Ly <= 0:
            raise ConfigError("domain side lengths must be positive")

    @property
    def dx(self) -> float:
        return self.Lx / self.nx

    @property
    def dy(self) -> float:
        return self.Ly / self.ny

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    def flat_index(self, i: int, j: int) -> int:
        return j * self.nx + i

    def cell_centers(self):
        """Cell-center coordinates as flat arrays (x, y), C-ordered by j then i."""
        x = (np.arange(self.nx) + 0.5) * self.dx
        y = (np.arange(self.ny) + 0.5) * self.dy
        xx, yy = np.meshgrid(x, y)  # shape (ny, nx)
        return xx.ravel(), yy.ravel()


def cell_of(grid: Grid, point) -> tuple[int, int]:
    """Map a point to the (i, j) cell containing it.

    Well sources are assigned entirely to the containing cell.  Points on
    the far boundary (x == Lx or y == Ly) belong to the last cell.
    """
    x, y = float(point[0]), float(point[1])
    if not (0.0 <= x <= grid.Lx and 0.0 <= y <= grid.Ly):
        raise OutsideDomainError(f"point ({x}, {y}) outside [0,{grid.Lx}]x[0,{grid.Ly}]")
    i = min(int(x / grid.dx), grid.nx - 1)
    j = min(int(y / grid.dy), grid.ny - 1)
    return i, j


@dataclass(frozen=True)
class Field:
    """One scalar per cell on a grid (log-permeability, pressure, saturation)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.grid.n_cells,):
            raise ConfigError(
                f"field has {vals.size} values, grid has {self.grid.n_cells} cells"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigError("field contains non-finite values")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: Grid, value: float) -> "Field":
        return cls(grid, np.full(grid.n_cells, float(value)))


INJECTOR = "injector"
PRODUCER = "producer"


@dataclass(frozen=True)
class WellSpec:
    """A rate-controlled well.

    ``rates`` holds the signed total volumetric rate (m^3/s) per report
    step; a single entry means constant in time.  Injector rates are
    positive, producer rates negative.  ``well_index`` is the Peaceman
    scaling factor used for bottom-hole pressure.
    """

    name: str
    kind: str
    x: float
    y: float
    rates: np.ndarray
    well_index: float

    def __post_init__(self):
        if self.kind not in (INJECTOR, PRODUCER):
            raise ConfigError(f"unknown well kind {self.kind!r}")
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float)).copy()
        if self.kind == INJECTOR and not np.all(rates > 0):
            raise ConfigError(f"injector {self.name}: rates must be positive")
        if self.kind == PRODUCER and not np.all(rates < 0):
            raise ConfigError(f"producer {self.name}: rates must be negative")
        if not self.well_index > 0:
            raise ConfigError(f"well {self.name}: well_index must be positive")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)


def peaceman_well_index(grid: Grid, k_ref: float, r_w: float = 0.1) -> float:
    """Well index from the Peaceman model with equivalent radius 0.2*dx.

    ``k_ref`` is the nominal absolute permeability (m^2) of the well block.
    """
    r_e = 0.2 * grid.dx
    if r_e <= r_w:
        raise ConfigError(f"equivalent radius {r_e} must exceed well radius {r_w}")
    return 2.0 * np.pi * k_ref * THICKNESS / np.log(r_e / r_w)


@dataclass(frozen=True)
class PhysicalParams:
    """Fluid and rock constants of the oil-water model."""

    mu_w: float = 5e-4    # water viscosity (Pa s)
    mu_o: float = 1e-2    # oil viscosity (Pa s)
    a_w: float = 0.3      # water rel-perm endpoint
    a_o: float = 0.9      # oil rel-perm endpoint
    s_iw: float = 0.2     # irreducible water saturation
    s_or: float = 0.2     # residual oil saturation
    porosity: float = 0.2
    p0: float = 2.5e7     # initial pressure (Pa)
    s0: float = 0.2       # initial water saturation

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ConfigError("viscosities must be positive")
        if not (0.0 < self.a_w <= 1.0 and 0.0 < self.a_o <= 1.0):
            raise ConfigError("rel-perm endpoints must lie in (0, 1]")
        if self.s_iw < 0 or self.s_or < 0 or self.s_iw + self.s_or >= 1:
            raise ConfigError("need s_iw, s_or >= 0 and s_iw + s_or < 1")
        if not (self.s_iw <= self.s0 <= 1.0 - self.s_or):
            raise ConfigError("s0 must lie in [s_iw, 1 - s_or]")
        phi = np.asarray(self.porosity, dtype=float)
        if np.any(phi <= 0) or np.any(phi >= 1):
            raise ConfigError("porosity values must lie in (0, 1)")

    @property
    def movable_range(self) -> float:
        return 1.0 - self.s_iw - self.s_or


@dataclass(frozen=True)
class Schedule:
    """Total simulated time, measurement times, and step ceiling (seconds)."""

    t_end: float
    report_times: np.ndarray
    max_dt: float

    def __post_init__(self):
        times = np.asarray(self.report_times, dtype=float).copy()
        if times.size == 0:
            raise ConfigError("schedule needs at least one report time")
        if not np.all(np.diff(times) > 0):
            raise ConfigError("report times must be strictly increasing")
        if times[0] <= 0 or times[-1] > self.t_end * (1 + 1e-12):
            raise ConfigError("report times must satisfy 0 < t_1 < ... <= t_end")
        if self.max_dt <= 0:
            raise ConfigError("max_dt must be positive")
        times.setflags(write=False)
        object.__setattr__(self, "report_times", times)

    @classmethod
    def uniform(cls, t_end: float, n_reports: int, max_dt: float) -> "Schedule":
        times = t_end * np.arange(1, n_reports + 1) / n_reports
        return cls(t_end=t_end, report_times=times, max_dt=max_dt)

    @property
    def n_reports(self) -> int:
        return self.report_times.size


def pore_volume(grid: Grid, params: PhysicalParams) -> float:
    """Total pore volume (m^3) of the reservoir including unit thickness."""
    phi = np.broadcast_to(np.asarray(params.porosity, dtype=float), (grid.n_cells,))
    return float(np.sum(phi) * grid.cell_area * THICKNESS)
