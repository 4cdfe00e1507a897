"""Deterministic CSV / JSON serialization of fields, observations, and runs.

All CSVs use comma separators, '.' decimal, a header row, and LF line
endings.  Floats are written with shortest round-trip representation, so
byte-identical inputs produce byte-identical files.  Rates are converted
to bbl/day at this reporting layer only; everything upstream is SI.
"""

from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import scipy

from .errors import ConfigError
from .grid import M3S_TO_BBL_PER_DAY, Field, Grid
from .simulator import KIND_BHP, ObservationLayout, ObservationVector

PACKAGE_VERSION = "0.1.0"

_RATE_UNIT = "bbl_per_day"
_BHP_UNIT = "Pa"


def _fmt(x) -> str:
    return repr(float(x))


def _open_writer(path):
    return open(path, "w", newline="\n")


def _display_value(kind: str, value: float) -> float:
    return value if kind == KIND_BHP else value * M3S_TO_BBL_PER_DAY


def _internal_value(kind: str, value: float) -> float:
    return value if kind == KIND_BHP else value / M3S_TO_BBL_PER_DAY


def write_field_csv(path, field: Field) -> None:
    """Row-major field file: one header line (nx,ny,Lx,Ly) then ny rows."""
    g = field.grid
    vals = field.values.reshape(g.ny, g.nx)
    with _open_writer(path) as fh:
        fh.write("nx,ny,Lx,Ly\n")
        fh.write(f"{g.nx},{g.ny},{_fmt(g.Lx)},{_fmt(g.Ly)}\n")
        for j in range(g.ny):
            fh.write(",".join(_fmt(v) for v in vals[j]) + "\n")


def read_field_csv(path) -> Field:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "nx,ny,Lx,Ly":
            raise ConfigError(f"{path}: not a field file (bad header {header!r})")
        nx_s, ny_s, lx_s, ly_s = fh.readline().strip().split(",")
        grid = Grid(int(nx_s), int(ny_s), float(lx_s), float(ly_s))
        rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    vals = np.array(rows)
    if vals.shape != (grid.ny, grid.nx):
        raise ConfigError(f"{path}: expected {grid.ny}x{grid.nx} values, got {vals.shape}")
    return Field(grid, vals.ravel())


def write_observations_csv(path, obs: ObservationVector) -> None:
    lay = obs.layout
    with _open_writer(path) as fh:
        fh.write("time,well_id,kind,value,unit\n")
        for i in range(lay.n):
            kind = lay.kinds[i]
            unit = _BHP_UNIT if kind == KIND_BHP else _RATE_UNIT
            fh.write(f"{_fmt(lay.times[i])},{lay.well_names[i]},{kind},"
                     f"{_fmt(_display_value(kind, obs.values[i]))},{unit}\n")


def read_observations_csv(path, layout: ObservationLayout) -> ObservationVector:
    """Read values back into a known layout, checking keys line by line."""
    values = np.empty(layout.n)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        i = 0
        for row in reader:
            if i >= layout.n:
                raise ConfigError(f"{path}: more rows than layout entries")
            if (row["well_id"] != layout.well_names[i]
                    or row["kind"] != layout.kinds[i]
                    or abs(float(row["time"]) - layout.times[i]) > 1e-6 * max(1.0, layout.times[i])):
                raise ConfigError(f"{path}: row {i} does not match the configured layout")
            values[i] = _internal_value(row["kind"], float(row["value"]))
            i += 1
    if i != layout.n:
        raise ConfigError(f"{path}: expected {layout.n} rows, found {i}")
    return ObservationVector(layout, values)


def write_noise_csv(path, layout: ObservationLayout, sigma: np.ndarray) -> None:
    with _open_writer(path) as fh:
        fh.write("time,well_id,kind,sigma,unit\n")
        for i in range(layout.n):
            kind = layout.kinds[i]
            unit = _BHP_UNIT if kind == KIND_BHP else _RATE_UNIT
            fh.write(f"{_fmt(layout.times[i])},{layout.well_names[i]},{kind},"
                     f"{_fmt(_display_value(kind, sigma[i]))},{unit}\n")


def read_noise_csv(path, layout: ObservationLayout) -> np.ndarray:
    sigma = np.empty(layout.n)
    with open(path) as fh:
        reader = csv.DictReader(fh)
        i = 0
        for row in reader:
            sigma[i] = _internal_value(row["kind"], float(row["sigma"]))
            i += 1
    if i != layout.n:
        raise ConfigError(f"{path}: expected {layout.n} rows, found {i}")
    return sigma


def write_reglm_iterations_csv(path, records) -> None:
    with _open_writer(path) as fh:
        fh.write("iteration,misfit,alpha,trials,rel_error,seconds\n")
        for r in records:
            fh.write(f"{r.iteration},{_fmt(r.misfit)},{_fmt(r.alpha)},{r.trials},"
                     f"{_fmt(r.rel_error)},{_fmt(r.seconds)}\n")


def write_stdlm_iterations_csv(path, records) -> None:
    """Accepted iterates only: the trajectory of the estimate itself."""
    with _open_writer(path) as fh:
        fh.write("iteration,misfit,J,lambda,stop_metric_J,stop_metric_u,"
                 "rel_error,seconds\n")
        for r in records:
            if not r.accepted:
                continue
            fh.write(f"{r.iteration},{_fmt(r.misfit)},{_fmt(r.objective)},{_fmt(r.lam)},"
                     f"{_fmt(r.stop_metric_obj)},{_fmt(r.stop_metric_u)},"
                     f"{_fmt(r.rel_error)},{_fmt(r.seconds)}\n")


def write_wells_csv(path, wells) -> None:
    """Well positions and constraints, for inspection of generated layouts."""
    with _open_writer(path) as fh:
        fh.write("name,kind,x,y,rate_m3_per_s,well_index\n")
        for w in wells:
            rate = w.rates[0] if w.rates.size == 1 else float(np.mean(w.rates))
            fh.write(f"{w.name},{w.kind},{_fmt(w.x)},{_fmt(w.y)},"
                     f"{_fmt(rate)},{_fmt(w.well_index)}\n")


def write_summary_csv(path, columns, rows) -> None:
    with _open_writer(path) as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for c in columns:
                v = row[c]
                cells.append(_fmt(v) if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command: str, config_path=None, seeds=None,
                   artifacts=None, extra=None) -> Path:
    """Record what produced this output directory (always written)."""
    payload = {
        "command": command,
        "package": {"name": "resinv", "version": PACKAGE_VERSION},
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "seeds": dict(seeds or {}),
        "artifacts": list(artifacts or []),
    }
    if config_path is not None:
        payload["config"] = {"path": str(config_path),
                             "sha256": config_sha256(config_path)}
    if extra:
        payload.update(extra)
    out = Path(out_dir) / "manifest.json"
    write_json(out, payload)
    return out
