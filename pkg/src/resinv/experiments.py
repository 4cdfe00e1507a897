"""Synthetic truths, noise models, and the comparison studies.

A study is a pure function of its setup and seeds: the truth field is
sampled once per study, each sweep point synthesizes its own data (fresh
noise stream derived from the base noise seed), runs the requested
inversion scheme, and leaves a directory of plot-ready CSVs.  Sweep points
are independent and may run in a process pool; outputs are assembled in
sweep order so repeated runs are byte-identical.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError
from .geostat import CovarianceOperator, sample_field
from .grid import INJECTOR, PRODUCER, Field, Grid, WellSpec
from .reg_lm import RegLMConfig, run_reg_lm
from .sensitivity import jacobian_adjoint, jacobian_fd
from .simulator import KIND_BHP, ObservationVector, ReservoirModel
from .std_lm import StdLMConfig, run_std_lm

SCHEME_REGLM = "reglm"
SCHEME_STDLM = "stdlm"


def standard_well_layout(grid: Grid, injector_rate: float, well_index: float):
    """Nine producers on the interior 3x3 lattice, four injectors between.

    Producers sit at fractions {1/4, 1/2, 3/4} of each side, injectors at
    {3/8, 5/8}; each producer withdraws an equal share of the total
    injection so the rates balance exactly.
    """
    if injector_rate <= 0:
        raise ConfigError("injector rate must be positive")
    producer_rate = -4.0 * injector_rate / 9.0
    wells = []
    k = 1
    for fy in (0.25, 0.5, 0.75):
        for fx in (0.25, 0.5, 0.75):
            wells.append(WellSpec(name=f"P{k}", kind=PRODUCER, x=fx * grid.Lx,
                                  y=fy * grid.Ly, rates=np.array([producer_rate]),
                                  well_index=well_index))
            k += 1
    k = 1
    for fy in (0.375, 0.625):
        for fx in (0.375, 0.625):
            wells.append(WellSpec(name=f"I{k}", kind=INJECTOR, x=fx * grid.Lx,
                                  y=fy * grid.Ly, rates=np.array([injector_rate]),
                                  well_index=well_index))
            k += 1
    return tuple(wells)


@dataclass(frozen=True)
class NoiseModel:
    """Diagonal observation-error model: per-entry standard deviations."""

    fraction: float
    sigma: np.ndarray
    seed: int

    @property
    def gamma(self) -> np.ndarray:
        return self.sigma**2


def build_gamma(clean_obs: ObservationVector, model: ReservoirModel,
                fraction: float, seed: int = 0) -> NoiseModel:
    """Noise sigmas as a fraction of nominal values.

    Bottom-hole pressures use the clean observation itself as the nominal
    value; water and oil rates both use the well's total rate constraint,
    which avoids zero sigmas where the water rate vanishes.
    """
    if fraction <= 0:
        raise ConfigError("noise fraction must be positive")
    lay = clean_obs.layout
    name_to_well = {w.name: i for i, w in enumerate(model.wells)}
    sigma = np.empty(lay.n)
    for i in range(lay.n):
        if lay.kinds[i] == KIND_BHP:
            nominal = abs(clean_obs.values[i])
        else:
            widx = name_to_well[lay.well_names[i]]
            report = i // lay.block_size
            nominal = abs(model.well_rates[widx, report])
        if nominal == 0.0:
            raise ConfigError(
                f"zero nominal value for observation {i} ({lay.kinds[i]} at "
                f"{lay.well_names[i]}): cannot build the error covariance"
            )
        sigma[i] = fraction * nominal
    return NoiseModel(fraction=fraction, sigma=sigma, seed=seed)


def synthesize_data(truth: Field, model: ReservoirModel, noise: NoiseModel,
                    clean: ObservationVector | None = None):
    """Perturb the truth's observations; returns (noisy data, realized eta).

    eta is the exactly realized whitened perturbation norm, not an
    estimate; it is what the discrepancy stopping rule consumes.
    """
    if clean is None:
        clean = model.simulate(truth).observations
    rng = np.random.default_rng(noise.seed)
    z = rng.standard_normal(clean.n)
    xi = noise.sigma * z
    eta = float(np.linalg.norm(z))
    return clean.with_values(clean.values + xi), eta


class ReservoirProblem:
    """Forward/Jacobian interface over a reservoir model for the drivers.

    Caches the last simulated trajectory so the Jacobian at the same
    iterate reuses it instead of re-simulating.
    """

    def __init__(self, model: ReservoirModel, method: str = "adjoint",
                 fd_step: float = 1e-6):
        if method not in ("adjoint", "fd"):
            raise ConfigError(f"unknown sensitivity method {method!r}")
        self.model = model
        self.method = method
        self.fd_step = fd_step
        self._cache_key = None
        self._cache_result = None

    def _simulate(self, u: np.ndarray):
        key = u.tobytes()
        if key != self._cache_key:
            self._cache_result = self.model.simulate(u, record_trajectory=True)
            self._cache_key = key
        return self._cache_result

    def forward(self, u) -> np.ndarray:
        return self._simulate(np.asarray(u, dtype=float)).observations.values

    def jacobian(self, u) -> np.ndarray:
        base = self._simulate(np.asarray(u, dtype=float))
        if self.method == "adjoint":
            return jacobian_adjoint(self.model, u, base=base).matrix
        return jacobian_fd(self.model, u, h=self.fd_step, base=base).matrix


@dataclass(frozen=True)
class CaseSetup:
    """Everything a study needs: model, prior, seeds, solver settings."""

    model: ReservoirModel
    cov0: CovarianceOperator           # kappa = 1 correlation structure
    prior_mean: np.ndarray
    kappa: float = 1.0
    noise_fraction: float = 0.01
    truth_seed: int = 7
    truth_kappa: float = 1.0
    noise_seed: int = 101
    reglm: RegLMConfig = RegLMConfig()
    stdlm: StdLMConfig = StdLMConfig()
    jacobian_method: str = "adjoint"
    fd_step: float = 1e-6

    def prior_field(self) -> Field:
        return Field(self.model.grid, self.prior_mean)

    def sample_truth(self) -> Field:
        cov = self.cov0.scaled(self.truth_kappa)
        return sample_field(cov, self.prior_field(), self.truth_seed)

    def problem(self) -> ReservoirProblem:
        return ReservoirProblem(self.model, self.jacobian_method, self.fd_step)


@dataclass
class Outcome:
    """Summary of one inversion run within a study."""

    label: str
    value: float
    scheme: str
    eta: float
    converged: bool
    iterations: int
    final_misfit: float
    final_rel_error: float
    records: list
    u: np.ndarray
    noise_seed: int
    noise_fraction: float = np.nan


def invert(setup: CaseSetup, scheme: str, y: np.ndarray, gamma: np.ndarray,
           eta: float, truth=None, kappa: float | None = None,
           reglm: RegLMConfig | None = None, stdlm: StdLMConfig | None = None):
    """Run one inversion scheme against prepared data."""
    cov = setup.cov0.scaled(setup.kappa if kappa is None else kappa)
    problem = setup.problem()
    u0 = setup.prior_mean
    if scheme == SCHEME_REGLM:
        return run_reg_lm(problem, cov, y, gamma, eta, reglm or setup.reglm,
                          u0=u0, truth=truth)
    if scheme == SCHEME_STDLM:
        return run_std_lm(problem, cov, y, gamma, stdlm or setup.stdlm,
                          u0=u0, truth=truth)
    raise ConfigError(f"unknown inversion scheme {scheme!r}")


def outcome_from_result(label, value, scheme, eta, result, noise_seed,
                         noise_fraction) -> Outcome:
    if scheme == SCHEME_REGLM:
        final = result.records[-1]
        return Outcome(label=label, value=value, scheme=scheme, eta=eta,
                       converged=result.converged, iterations=result.iterations,
                       final_misfit=final.misfit, final_rel_error=final.rel_error,
                       records=result.records, u=result.u, noise_seed=noise_seed,
                       noise_fraction=noise_fraction)
    accepted = result.accepted_records
    final = accepted[-1]
    return Outcome(label=label, value=value, scheme=scheme, eta=eta,
                   converged=result.converged, iterations=final.iteration,
                   final_misfit=final.misfit, final_rel_error=final.rel_error,
                   records=result.records, u=result.u, noise_seed=noise_seed,
                   noise_fraction=noise_fraction)


# ---------------------------------------------------------------------------
# Study runners

def _run_point(args) -> Outcome:
    (setup, truth_values, clean_values, scheme, label, value,
     fraction, noise_seed, kappa, reglm, stdlm) = args
    model = setup.model
    truth = Field(model.grid, truth_values)
    clean = ObservationVector(model.layout, clean_values)
    noise = build_gamma(clean, model, fraction, seed=noise_seed)
    y, eta = synthesize_data(truth, model, noise, clean=clean)
    result = invert(setup, scheme, y.values, noise.gamma, eta,
                    truth=truth_values, kappa=kappa, reglm=reglm, stdlm=stdlm)
    return outcome_from_result(label, value, scheme, eta, result, noise_seed, fraction)


def _execute(tasks, threads: int):
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_run_point, tasks))
    return [_run_point(t) for t in tasks]


def _write_point_dir(out_dir: Path, setup: CaseSetup, truth: Field,
                     clean: ObservationVector, outcome: Outcome) -> list[str]:
    model = setup.model
    pdir = out_dir / outcome.label
    pdir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    noise = build_gamma(clean, model, outcome.noise_fraction, seed=outcome.noise_seed)
    y, eta = synthesize_data(truth, model, noise, clean=clean)
    io.write_observations_csv(pdir / "observations_noisy.csv", y)
    io.write_noise_csv(pdir / "noise.csv", model.layout, noise.sigma)
    io.write_json(pdir / "noise_meta.json",
                  {"fraction": noise.fraction, "seed": noise.seed,
                   "eta": eta, "n_obs": model.n_obs})
    if outcome.scheme == SCHEME_REGLM:
        io.write_reglm_iterations_csv(pdir / "iterations.csv", outcome.records)
    else:
        io.write_stdlm_iterations_csv(pdir / "iterations.csv", outcome.records)
    io.write_field_csv(pdir / "estimate_field.csv", Field(model.grid, outcome.u))
    predicted = model.simulate(outcome.u).observations
    io.write_observations_csv(pdir / "predicted_observations.csv", predicted)
    for name in ("observations_noisy.csv", "noise.csv", "noise_meta.json",
                 "iterations.csv", "estimate_field.csv", "predicted_observations.csv"):
        artifacts.append(str(Path(outcome.label) / name))
    return artifacts


_SUMMARY_COLUMNS = ("label", "value", "scheme", "noise_seed", "eta", "iterations",
                    "converged", "final_misfit", "final_rel_error")


def _finalize_study(out_dir, setup, truth, clean, outcomes) -> list[str]:
    artifacts = []
    if out_dir is None:
        return artifacts
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_field_csv(out_dir / "truth_field.csv", truth)
    io.write_observations_csv(out_dir / "clean_observations.csv", clean)
    io.write_wells_csv(out_dir / "wells.csv", setup.model.wells)
    artifacts += ["truth_field.csv", "clean_observations.csv", "wells.csv"]
    rows = []
    for oc in outcomes:
        artifacts += _write_point_dir(out_dir, setup, truth, clean, oc)
        rows.append({"label": oc.label, "value": float(oc.value), "scheme": oc.scheme,
                     "noise_seed": oc.noise_seed, "eta": float(oc.eta),
                     "iterations": oc.iterations, "converged": oc.converged,
                     "final_misfit": float(oc.final_misfit),
                     "final_rel_error": float(oc.final_rel_error)})
    io.write_summary_csv(out_dir / "summary.csv", _SUMMARY_COLUMNS, rows)
    artifacts.append("summary.csv")
    return artifacts


def _truth_and_clean(setup: CaseSetup):
    truth = setup.sample_truth()
    clean = setup.model.simulate(truth).observations
    return truth, clean


def run_noise_study(setup: CaseSetup, fractions=(5e-2, 1e-2, 5e-3, 1e-3, 5e-4),
                    out_dir=None, threads: int = 1):
    """Regularizing-LM accuracy across noise levels (fixed truth seed)."""
    if len(fractions) == 0 or any(f <= 0 for f in fractions):
        raise ConfigError("noise study needs positive sweep fractions")
    truth, clean = _truth_and_clean(setup)
    tasks = [(setup, truth.values, clean.values, SCHEME_REGLM, f"f_{f!r}", float(f),
              float(f), setup.noise_seed + i, None, None, None)
             for i, f in enumerate(fractions)]
    outcomes = _execute(tasks, threads)
    artifacts = _finalize_study(out_dir, setup, truth, clean, outcomes)
    return outcomes, artifacts


def run_rho_study(setup: CaseSetup, rhos=(0.6, 0.7, 0.8, 0.9, 0.99),
                  out_dir=None, threads: int = 1):
    """Sweep the residual-retention fraction; tau follows as 1/(rho - 1e-3)."""
    if len(rhos) == 0 or any(not 0 < r < 1 for r in rhos):
        raise ConfigError("rho study needs sweep values in (0, 1)")
    truth, clean = _truth_and_clean(setup)
    tasks = []
    for r in rhos:
        cfg = replace(setup.reglm, rho=float(r), tau=1.0 / (float(r) - 1e-3))
        tasks.append((setup, truth.values, clean.values, SCHEME_REGLM, f"rho_{r!r}",
                      float(r), setup.noise_fraction, setup.noise_seed, None, cfg, None))
    outcomes = _execute(tasks, threads)
    artifacts = _finalize_study(out_dir, setup, truth, clean, outcomes)
    return outcomes, artifacts


def run_kappa_study(setup: CaseSetup, kappas=(1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4),
                    scheme: str = SCHEME_REGLM, out_dir=None, threads: int = 1):
    """Sweep the prior scaling C = C0/kappa at fixed data (same noise seed)."""
    if len(kappas) == 0 or any(k <= 0 for k in kappas):
        raise ConfigError("kappa study needs positive sweep values")
    if scheme not in (SCHEME_REGLM, SCHEME_STDLM):
        raise ConfigError(f"unknown scheme {scheme!r}")
    truth, clean = _truth_and_clean(setup)
    tasks = [(setup, truth.values, clean.values, scheme, f"kappa_{k!r}", float(k),
              setup.noise_fraction, setup.noise_seed, float(k), None, None)
             for k in kappas]
    outcomes = _execute(tasks, threads)
    artifacts = _finalize_study(out_dir, setup, truth, clean, outcomes)
    return outcomes, artifacts


STUDY_RUNNERS = {
    "noise": run_noise_study,
    "rho_tau": run_rho_study,
    "kappa_reglm": lambda setup, values, out_dir=None, threads=1:
        run_kappa_study(setup, values, SCHEME_REGLM, out_dir, threads),
    "kappa_stdlm": lambda setup, values, out_dir=None, threads=1:
        run_kappa_study(setup, values, SCHEME_STDLM, out_dir, threads),
}
