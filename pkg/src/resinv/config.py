"""Single-file TOML configuration: schema, defaults, and case assembly.

The file is the single source of truth for a run.  All quantities are SI
(metres, seconds, Pa, m^3/s); see README for the documented schema and a
complete example.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .experiments import CaseSetup, standard_well_layout
from .geostat import build_covariance
from .grid import (
    MILLIDARCY_M2,
    Field,
    Grid,
    PhysicalParams,
    Schedule,
    WellSpec,
    peaceman_well_index,
)
from .reg_lm import RegLMConfig
from .simulator import ReservoirModel
from .std_lm import StdLMConfig


@dataclass(frozen=True)
class StudyConfig:
    kind: str
    values: tuple
    threads: int = 1


@dataclass(frozen=True)
class LoadedCase:
    setup: CaseSetup
    study: StudyConfig | None
    raw: dict
    path: str | None


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _pop(sec: dict, key: str, default=None, required=False, section=""):
    if key in sec:
        return sec.pop(key)
    if required:
        raise ConfigError(f"missing required key {key!r} in [{section}]")
    return default


def _reject_unknown(sec: dict, section: str):
    if sec:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(sec)}")


def build_case(raw: dict, path: str | None = None) -> LoadedCase:
    g = _section(raw, "grid")
    grid = Grid(nx=int(_pop(g, "nx", 32)), ny=int(_pop(g, "ny", 32)),
                Lx=float(_pop(g, "lx", 2000.0)), Ly=float(_pop(g, "ly", 2000.0)))
    _reject_unknown(g, "grid")

    ph = _section(raw, "physical")
    params = PhysicalParams(
        mu_w=float(_pop(ph, "mu_w", 5e-4)),
        mu_o=float(_pop(ph, "mu_o", 1e-2)),
        a_w=float(_pop(ph, "a_w", 0.3)),
        a_o=float(_pop(ph, "a_o", 0.9)),
        s_iw=float(_pop(ph, "s_iw", 0.2)),
        s_or=float(_pop(ph, "s_or", 0.2)),
        porosity=float(_pop(ph, "porosity", 0.2)),
        p0=float(_pop(ph, "p0", 2.5e7)),
        s0=float(_pop(ph, "s0", 0.2)),
    )
    _reject_unknown(ph, "physical")

    sc = _section(raw, "schedule")
    t_end = float(_pop(sc, "t_end", 1.5768e8))
    max_dt = float(_pop(sc, "max_dt", 4.0e5))
    report_times = _pop(sc, "report_times")
    if report_times is not None:
        schedule = Schedule(t_end=t_end, report_times=np.asarray(report_times, dtype=float),
                            max_dt=max_dt)
    else:
        schedule = Schedule.uniform(t_end, int(_pop(sc, "n_reports", 20)), max_dt)
    _reject_unknown(sc, "schedule")

    pr = _section(raw, "prior")
    if "mean_log_perm" in pr:
        mean_u = float(_pop(pr, "mean_log_perm"))
        _pop(pr, "mean_perm_md")
    else:
        mean_u = math.log(float(_pop(pr, "mean_perm_md", 500.0)) * MILLIDARCY_M2)
    cov_range = float(_pop(pr, "range", grid.Lx / 4.0))
    theta = float(_pop(pr, "theta", 0.0))
    axis_ratio = float(_pop(pr, "axis_ratio", 1.0))
    kappa = float(_pop(pr, "kappa", 1.0))
    _reject_unknown(pr, "prior")

    w = _section(raw, "wells")
    layout = _pop(w, "layout", "standard")
    well_radius = float(_pop(w, "well_radius", 0.1))
    default_wi = peaceman_well_index(grid, math.exp(mean_u), well_radius)
    well_index = float(_pop(w, "well_index", default_wi))
    _pop(w, "bhp_constraint", 2.7e7)  # exposed, unused: no well is BHP-controlled
    if layout == "standard":
        injector_rate = float(_pop(w, "injector_rate", 6.0e-4))
        wells = standard_well_layout(grid, injector_rate, well_index)
        _pop(w, "list")
    elif layout == "explicit":
        entries = _pop(w, "list", required=True, section="wells")
        wells = []
        for e in entries:
            e = dict(e)
            rates = e.pop("rates", None)
            if rates is None:
                rates = [float(e.pop("rate"))]
            wells.append(WellSpec(
                name=str(e.pop("name")), kind=str(e.pop("kind")),
                x=float(e.pop("x")), y=float(e.pop("y")),
                rates=np.asarray(rates, dtype=float),
                well_index=float(e.pop("well_index", well_index)),
            ))
            if e:
                raise ConfigError(f"unknown well keys: {sorted(e)}")
        wells = tuple(wells)
    else:
        raise ConfigError(f"unknown wells.layout {layout!r}")
    _reject_unknown(w, "wells")

    model = ReservoirModel(grid, wells, params, schedule)
    cov0 = build_covariance(grid, a=cov_range, theta=theta,
                            axis_ratio=axis_ratio, kappa=1.0)

    tr = _section(raw, "truth")
    truth_seed = int(_pop(tr, "seed", 7))
    truth_kappa = float(_pop(tr, "kappa", 1.0))
    _reject_unknown(tr, "truth")

    nz = _section(raw, "noise")
    noise_fraction = float(_pop(nz, "fraction", 0.01))
    noise_seed = int(_pop(nz, "seed", 101))
    _reject_unknown(nz, "noise")

    rl = _section(raw, "reg_lm")
    reglm = RegLMConfig(
        rho=float(_pop(rl, "rho", 0.83)),
        tau=float(_pop(rl, "tau", 1.2)),
        alpha0=(float(rl.pop("alpha0")) if "alpha0" in rl else None),
        alpha_growth=float(_pop(rl, "alpha_growth", 2.0)),
        max_iterations=int(_pop(rl, "max_iterations", 50)),
        max_alpha_trials=int(_pop(rl, "max_alpha_trials", 60)),
    )
    _reject_unknown(rl, "reg_lm")

    sl = _section(raw, "std_lm")
    stdlm = StdLMConfig(
        lambda0=(float(sl.pop("lambda0")) if "lambda0" in sl else None),
        eps0=float(_pop(sl, "eps0", 1e-4)),
        eps1=float(_pop(sl, "eps1", 1e-3)),
        max_iterations=int(_pop(sl, "max_iterations", 50)),
        lambda_floor=float(_pop(sl, "lambda_floor", 1e-10)),
        lambda_cap=float(_pop(sl, "lambda_cap", 1e10)),
        accept_uphill=bool(_pop(sl, "accept_uphill", False)),
    )
    _reject_unknown(sl, "std_lm")

    sv = _section(raw, "sensitivity")
    method = str(_pop(sv, "method", "adjoint"))
    fd_step = float(_pop(sv, "fd_step", 1e-6))
    _reject_unknown(sv, "sensitivity")

    st = _section(raw, "study")
    study = None
    if st:
        kind = str(_pop(st, "kind", required=True, section="study"))
        values = _pop(st, "values")
        threads = int(_pop(st, "threads", 1))
        _reject_unknown(st, "study")
        study = StudyConfig(kind=kind, values=tuple(values) if values else (),
                            threads=threads)

    known = {"grid", "physical", "schedule", "prior", "wells", "truth", "noise",
             "reg_lm", "std_lm", "sensitivity", "study", "simulate"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")

    setup = CaseSetup(
        model=model, cov0=cov0,
        prior_mean=np.full(grid.n_cells, mean_u),
        kappa=kappa, noise_fraction=noise_fraction,
        truth_seed=truth_seed, truth_kappa=truth_kappa, noise_seed=noise_seed,
        reglm=reglm, stdlm=stdlm, jacobian_method=method, fd_step=fd_step,
    )
    return LoadedCase(setup=setup, study=study, raw=raw, path=path)


def load_case(path) -> LoadedCase:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return build_case(raw, path=str(path))


def simulate_field_path(raw: dict):
    """Optional [simulate] log_perm_file key, if present."""
    sec = raw.get("simulate", {})
    return sec.get("log_perm_file")
