import json

import numpy as np
import pytest

from resinv import io
from resinv.errors import ConfigError
from resinv.grid import Field, Grid, M3S_TO_BBL_PER_DAY
from resinv.reg_lm import IterationRecord
from resinv.simulator import ObservationLayout, ObservationVector
from resinv.std_lm import StdIterationRecord


def small_layout():
    block = ("bhp", "water_rate", "oil_rate")
    names = ("I1", "P1", "P1")
    rt = np.array([10.0, 20.0])
    return ObservationLayout(times=np.repeat(rt, 3), well_names=names * 2,
                             kinds=block * 2, report_times=rt, block_size=3)


class TestFieldFile:
    def test_round_trip_exact(self, tmp_path):
        grid = Grid(5, 3, 100.0, 60.0)
        rng = np.random.default_rng(0)
        field = Field(grid, rng.standard_normal(15) * 1e-13)
        path = tmp_path / "field.csv"
        io.write_field_csv(path, field)
        back = io.read_field_csv(path)
        assert back.grid == grid
        assert np.array_equal(back.values, field.values)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("not,a,field,file\n")
        with pytest.raises(ConfigError):
            io.read_field_csv(path)


class TestObservationsFile:
    def test_round_trip_with_unit_conversion(self, tmp_path):
        layout = small_layout()
        values = np.array([2.5e7, 1e-4, 2e-4, 2.6e7, 1.5e-4, 1.5e-4])
        obs = ObservationVector(layout, values)
        path = tmp_path / "obs.csv"
        io.write_observations_csv(path, obs)
        text = path.read_text()
        assert text.splitlines()[0] == "time,well_id,kind,value,unit"
        assert "bbl_per_day" in text and ",Pa" in text
        back = io.read_observations_csv(path, layout)
        assert np.allclose(back.values, values, rtol=1e-13)

    def test_rate_conversion_factor(self, tmp_path):
        layout = small_layout()
        values = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0])
        path = tmp_path / "obs.csv"
        io.write_observations_csv(path, ObservationVector(layout, values))
        rows = path.read_text().splitlines()[1:]
        rate_row = rows[1].split(",")
        assert float(rate_row[3]) == M3S_TO_BBL_PER_DAY

    def test_layout_mismatch_rejected(self, tmp_path):
        layout = small_layout()
        obs = ObservationVector(layout, np.ones(6))
        path = tmp_path / "obs.csv"
        io.write_observations_csv(path, obs)
        other = ObservationLayout(times=layout.times,
                                  well_names=("I9",) * 6, kinds=layout.kinds,
                                  report_times=layout.report_times, block_size=3)
        with pytest.raises(ConfigError):
            io.read_observations_csv(path, other)


class TestIterationFiles:
    def test_reglm_columns(self, tmp_path):
        recs = [IterationRecord(iteration=0, misfit=10.0, alpha=2.0, trials=3,
                                rel_error=0.5, seconds=0.1)]
        path = tmp_path / "it.csv"
        io.write_reglm_iterations_csv(path, recs)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,misfit,alpha,trials,rel_error,seconds"
        assert lines[1].startswith("0,10.0,2.0,3,0.5,")

    def test_stdlm_skips_rejected(self, tmp_path):
        recs = [
            StdIterationRecord(iteration=0, misfit=5.0, objective=10.0, lam=1.0),
            StdIterationRecord(iteration=1, misfit=6.0, objective=12.0, lam=1.0,
                               accepted=False),
            StdIterationRecord(iteration=2, misfit=4.0, objective=8.0, lam=10.0),
        ]
        path = tmp_path / "it.csv"
        io.write_stdlm_iterations_csv(path, recs)
        lines = path.read_text().splitlines()
        assert len(lines) == 3  # header + two accepted rows
        assert lines[0].startswith("iteration,misfit,J,lambda,")
        assert lines[1].split(",")[0] == "0"
        assert lines[2].split(",")[0] == "2"


class TestManifest:
    def test_manifest_contents(self, tmp_path):
        cfg = tmp_path / "case.toml"
        cfg.write_text("[grid]\nnx = 8\n")
        out = io.write_manifest(tmp_path, command="simulate", config_path=cfg,
                                seeds={"truth": 7}, artifacts=["a.csv"],
                                extra={"eta": 1.5})
        payload = json.loads(out.read_text())
        assert payload["command"] == "simulate"
        assert payload["seeds"] == {"truth": 7}
        assert payload["artifacts"] == ["a.csv"]
        assert payload["eta"] == 1.5
        assert payload["config"]["sha256"] == io.config_sha256(cfg)
