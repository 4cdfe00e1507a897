"""Command-line entry point: one binary, verb-style subcommands.

The configuration file is the single source of truth; flags only override
scalar fields (seeds, thread count).  Every run writes a manifest with the
config hash, effective seeds, and produced artifacts.  Exit codes: 0 on
success, 1 on usage or configuration errors, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .checks import run_checks
from .config import LoadedCase, load_case, simulate_field_path
from .errors import ConfigError, NumericalError, ResinvError
from .experiments import (
    SCHEME_REGLM,
    SCHEME_STDLM,
    STUDY_RUNNERS,
    build_gamma,
    invert,
    outcome_from_result,
    synthesize_data,
)
from .grid import Field
from .simulator import ObservationVector

log = logging.getLogger("resinv")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resinv",
        description="History matching of a two-phase reservoir by iteratively "
                    "regularized Levenberg-Marquardt",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, needs_out=True):
        p.add_argument("-c", "--config", required=True, help="TOML case file")
        if needs_out:
            p.add_argument("-o", "--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override truth seed (noise seed becomes seed+1)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker pool size (default: RESINV_THREADS or 1)")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("simulate", help="run the forward model, write observations")
    common(p)
    p.add_argument("--field", help="log-permeability field CSV (default: prior mean)")
    p.add_argument("--dump-states", action="store_true",
                   help="also write pressure/saturation fields per report time")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sample-truth", help="sample a synthetic truth field")
    common(p)
    p.set_defaults(func=_cmd_sample_truth)

    p = sub.add_parser("synth-data", help="simulate a truth and add noise")
    common(p)
    p.add_argument("--field", help="truth field CSV (default: sample from the prior)")
    p.set_defaults(func=_cmd_synth_data)

    for verb, scheme in (("invert-reglm", SCHEME_REGLM), ("invert-stdlm", SCHEME_STDLM)):
        p = sub.add_parser(verb, help=f"run the {scheme} inversion")
        common(p)
        p.add_argument("--data", help="directory from synth-data (default: self-synthesize)")
        p.set_defaults(func=_cmd_invert, scheme=scheme)

    p = sub.add_parser("study", help="run the study configured in [study]")
    common(p)
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("check", help="run the invariant battery")
    common(p, needs_out=False)
    p.add_argument("-o", "--out", required=False, help="optional report directory")
    p.set_defaults(func=_cmd_check)
    return parser


def _effective_threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("RESINV_THREADS")
    return max(1, int(env)) if env else 1


def _load(args) -> LoadedCase:
    case = load_case(args.config)
    if args.seed is not None:
        setup = dataclasses.replace(case.setup, truth_seed=args.seed,
                                    noise_seed=args.seed + 1)
        case = dataclasses.replace(case, setup=setup)
    return case


def _prepare_out(args, case: LoadedCase) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_manifest(out, command=args.verb, config_path=case.path,
                      seeds=_seeds(case), artifacts=[])
    return out


def _seeds(case: LoadedCase) -> dict:
    return {"truth": case.setup.truth_seed, "noise": case.setup.noise_seed}


def _finish(out: Path, args, case: LoadedCase, artifacts, extra=None):
    io.write_manifest(out, command=args.verb, config_path=case.path,
                      seeds=_seeds(case), artifacts=artifacts, extra=extra)


def _cmd_simulate(args, case: LoadedCase) -> int:
    setup = case.setup
    out = _prepare_out(args, case)
    field_path = args.field or simulate_field_path(case.raw)
    if field_path:
        u = io.read_field_csv(field_path)
        if u.grid.n_cells != setup.model.n_cells:
            raise ConfigError("log-permeability file does not match the configured grid")
    else:
        u = setup.prior_field()
    result = setup.model.simulate(u.values, record_trajectory=args.dump_states)
    io.write_observations_csv(out / "observations.csv", result.observations)
    artifacts = ["observations.csv"]
    if args.dump_states:
        traj = result.trajectory
        for r, node in enumerate(traj.report_nodes):
            for name, vals in (("pressure", traj.p_nodes[node]),
                               ("saturation", traj.s_nodes[node])):
                fname = f"{name}_report{r:03d}.csv"
                io.write_field_csv(out / fname, Field(setup.model.grid, vals))
                artifacts.append(fname)
    _finish(out, args, case, artifacts)
    return 0


def _cmd_sample_truth(args, case: LoadedCase) -> int:
    setup = case.setup
    out = _prepare_out(args, case)
    truth = setup.sample_truth()
    io.write_field_csv(out / "truth_field.csv", truth)
    _finish(out, args, case, ["truth_field.csv"])
    return 0


def _synthesize(setup, truth: Field):
    clean = setup.model.simulate(truth.values).observations
    noise = build_gamma(clean, setup.model, setup.noise_fraction, seed=setup.noise_seed)
    y, eta = synthesize_data(truth, setup.model, noise, clean=clean)
    return clean, noise, y, eta


def _cmd_synth_data(args, case: LoadedCase) -> int:
    setup = case.setup
    out = _prepare_out(args, case)
    truth = io.read_field_csv(args.field) if args.field else setup.sample_truth()
    clean, noise, y, eta = _synthesize(setup, truth)
    io.write_field_csv(out / "truth_field.csv", truth)
    io.write_observations_csv(out / "clean_observations.csv", clean)
    io.write_observations_csv(out / "observations_noisy.csv", y)
    io.write_noise_csv(out / "noise.csv", setup.model.layout, noise.sigma)
    io.write_wells_csv(out / "wells.csv", setup.model.wells)
    io.write_json(out / "noise_meta.json",
                  {"fraction": noise.fraction, "seed": noise.seed,
                   "eta": eta, "n_obs": setup.model.n_obs})
    _finish(out, args, case,
            ["truth_field.csv", "clean_observations.csv", "observations_noisy.csv",
             "noise.csv", "wells.csv", "noise_meta.json"], extra={"eta": eta})
    return 0


def _cmd_invert(args, case: LoadedCase) -> int:
    setup = case.setup
    out = _prepare_out(args, case)
    artifacts = []
    truth_values = None
    if args.data:
        data_dir = Path(args.data)
        y = io.read_observations_csv(data_dir / "observations_noisy.csv",
                                     setup.model.layout)
        sigma = io.read_noise_csv(data_dir / "noise.csv", setup.model.layout)
        with open(data_dir / "noise_meta.json") as fh:
            eta = float(json.load(fh)["eta"])
        gamma = sigma**2
    else:
        truth = setup.sample_truth()
        truth_values = truth.values
        clean, noise, y, eta = _synthesize(setup, truth)
        gamma = noise.gamma
        io.write_field_csv(out / "truth_field.csv", truth)
        io.write_observations_csv(out / "observations_noisy.csv", y)
        io.write_noise_csv(out / "noise.csv", setup.model.layout, noise.sigma)
        io.write_json(out / "noise_meta.json",
                      {"fraction": noise.fraction, "seed": noise.seed,
                       "eta": eta, "n_obs": setup.model.n_obs})
        artifacts += ["truth_field.csv", "observations_noisy.csv", "noise.csv",
                      "noise_meta.json"]

    result = invert(setup, args.scheme, y.values, gamma, eta, truth=truth_values)
    outcome = outcome_from_result("run", np.nan, args.scheme, eta, result,
                                   setup.noise_seed, setup.noise_fraction)
    if args.scheme == SCHEME_REGLM:
        io.write_reglm_iterations_csv(out / "iterations.csv", result.records)
    else:
        io.write_stdlm_iterations_csv(out / "iterations.csv", result.records)
    io.write_field_csv(out / "estimate_field.csv", Field(setup.model.grid, result.u))
    predicted = setup.model.simulate(result.u).observations
    io.write_observations_csv(out / "predicted_observations.csv", predicted)
    artifacts += ["iterations.csv", "estimate_field.csv", "predicted_observations.csv"]
    _finish(out, args, case, artifacts,
            extra={"eta": eta, "converged": outcome.converged,
                   "iterations": outcome.iterations,
                   "final_misfit": outcome.final_misfit})
    log.info("%s: converged=%s iterations=%d final misfit %.6e",
             args.scheme, outcome.converged, outcome.iterations, outcome.final_misfit)
    return 0


def _cmd_study(args, case: LoadedCase) -> int:
    if case.study is None:
        raise ConfigError("config has no [study] section")
    runner = STUDY_RUNNERS.get(case.study.kind)
    if runner is None:
        raise ConfigError(f"unknown study kind {case.study.kind!r} "
                          f"(choose from {sorted(STUDY_RUNNERS)})")
    out = _prepare_out(args, case)
    threads = args.threads if args.threads is not None else case.study.threads
    kwargs = {"out_dir": out, "threads": max(1, threads or 1)}
    if case.study.values:
        outcomes, artifacts = runner(case.setup, case.study.values, **kwargs)
    else:
        outcomes, artifacts = runner(case.setup, **kwargs)
    _finish(out, args, case, artifacts,
            extra={"study": case.study.kind,
                   "points": [oc.label for oc in outcomes]})
    return 0


def _cmd_check(args, case: LoadedCase) -> int:
    results = run_checks(case.setup)
    all_ok = True
    lines = []
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {name}: {detail}"
        print(line)
        lines.append(line)
        all_ok &= ok
    if args.out:
        out = _prepare_out(args, case)
        (out / "checks.txt").write_text("\n".join(lines) + "\n")
        _finish(out, args, case, ["checks.txt"])
    return 0 if all_ok else 2


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        case = _load(args)
        return args.func(args, case)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ResinvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
