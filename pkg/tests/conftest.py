"""Shared fixtures: small reservoir cases and a linear test double."""

import numpy as np
import pytest

from resinv.grid import Grid, PhysicalParams, Schedule, WellSpec, peaceman_well_index
from resinv.simulator import ObservationLayout, ObservationVector, ReservoirModel

MEAN_LOG_PERM = float(np.log(500 * 9.869233e-16))  # 500 md in log m^2


class LinearModel:
    """Linear forward map wired through the simulator-style interface.

    ``G(u) = B u + offset``; ``simulate`` mimics the pieces jacobian_fd
    uses (observations plus a step sequence), so the sensitivity oracles
    and the inversion drivers run against it unchanged.
    """

    class _Result:
        def __init__(self, values, layout):
            self.observations = ObservationVector(layout, values)
            self.dts = np.ones(3)
            self.trajectory = None

    def __init__(self, matrix, offset=None):
        self.matrix = np.asarray(matrix, dtype=float)
        self.offset = np.zeros(self.matrix.shape[0]) if offset is None \
            else np.asarray(offset, dtype=float)
        n = self.matrix.shape[0]
        self.layout = ObservationLayout(
            times=np.arange(1.0, n + 1.0), well_names=tuple(f"W{i}" for i in range(n)),
            kinds=tuple("bhp" for _ in range(n)),
            report_times=np.arange(1.0, n + 1.0), block_size=1)
        self.n_obs = n
        self.n_cells = self.matrix.shape[1]

    def simulate(self, u, fixed_steps=None, record_trajectory=False):
        vals = self.matrix @ np.asarray(u, dtype=float) + self.offset
        return self._Result(vals, self.layout)

    def forward(self, u):
        return self.matrix @ np.asarray(u, dtype=float) + self.offset

    def jacobian(self, u):
        return self.matrix.copy()


def two_well_model(nx=8, ny=8, t_end=0.3 * 3.1536e7, n_reports=3, max_dt=4e5,
                   rate=6e-4):
    """Small diagonal injector/producer pair used by the sensitivity tests."""
    grid = Grid(nx, ny, 2000.0, 2000.0)
    params = PhysicalParams()
    wi = peaceman_well_index(grid, np.exp(MEAN_LOG_PERM))
    wells = (
        WellSpec(name="I1", kind="injector", x=0.3 * grid.Lx, y=0.3 * grid.Ly,
                 rates=np.array([rate]), well_index=wi),
        WellSpec(name="P1", kind="producer", x=0.7 * grid.Lx, y=0.7 * grid.Ly,
                 rates=np.array([-rate]), well_index=wi),
    )
    schedule = Schedule.uniform(t_end, n_reports, max_dt)
    return ReservoirModel(grid, wells, params, schedule)


@pytest.fixture(scope="session")
def small_model():
    return two_well_model()


@pytest.fixture(scope="session")
def small_heterogeneous_u(small_model):
    rng = np.random.default_rng(3)
    return MEAN_LOG_PERM + 0.5 * rng.standard_normal(small_model.n_cells)
