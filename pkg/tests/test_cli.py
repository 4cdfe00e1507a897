import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from resinv.cli import main

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke8.toml"


def run_cli(*args):
    return main([str(a) for a in args])


class TestDispatch:
    def test_unknown_verb_is_usage_error(self, capsys):
        assert run_cli("optimize", "-c", SMOKE) == 1

    def test_missing_config_flag_is_usage_error(self):
        assert run_cli("simulate", "-o", "/tmp/x") == 1

    def test_missing_config_file(self, tmp_path):
        assert run_cli("simulate", "-c", tmp_path / "none.toml", "-o", tmp_path) == 1

    def test_help_exits_zero(self):
        assert run_cli("--help") == 0


class TestSimulate:
    def test_happy_path_writes_observations(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("simulate", "-c", SMOKE, "-o", out) == 0
        assert (out / "observations.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert "observations.csv" in manifest["artifacts"]

    def test_dump_states_writes_fields(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("simulate", "-c", SMOKE, "-o", out, "--dump-states") == 0
        assert (out / "pressure_report000.csv").exists()
        assert (out / "saturation_report003.csv").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("simulate", "-c", SMOKE, "-o", out1) == 0
        assert run_cli("simulate", "-c", SMOKE, "-o", out2) == 0
        assert (out1 / "observations.csv").read_bytes() == \
            (out2 / "observations.csv").read_bytes()

    def test_numerical_failure_exit_code(self, tmp_path):
        # a degenerate permeability field makes the pressure system singular
        out = tmp_path / "out"
        assert run_cli("sample-truth", "-c", SMOKE, "-o", out) == 0
        field = out / "truth_field.csv"
        lines = field.read_text().splitlines()
        dead = ",".join(["-800.0"] * 8)
        field.write_text("\n".join(lines[:2] + [dead] * 8) + "\n")
        assert run_cli("simulate", "-c", SMOKE, "-o", out, "--field", field) == 2


class TestSampleTruth:
    def test_writes_field_and_manifest(self, tmp_path):
        out = tmp_path / "out"
        assert run_cli("sample-truth", "-c", SMOKE, "-o", out) == 0
        assert (out / "truth_field.csv").exists()

    def test_seed_override_changes_field(self, tmp_path):
        out1, out2, out3 = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        run_cli("sample-truth", "-c", SMOKE, "-o", out1)
        run_cli("sample-truth", "-c", SMOKE, "-o", out2, "--seed", "99")
        run_cli("sample-truth", "-c", SMOKE, "-o", out3, "--seed", "99")
        a = (out1 / "truth_field.csv").read_bytes()
        b = (out2 / "truth_field.csv").read_bytes()
        c = (out3 / "truth_field.csv").read_bytes()
        assert a != b
        assert b == c


class TestSynthAndInvert:
    def test_synth_then_invert_with_data_dir(self, tmp_path):
        data = tmp_path / "data"
        assert run_cli("synth-data", "-c", SMOKE, "-o", data) == 0
        for name in ("observations_noisy.csv", "noise.csv", "noise_meta.json",
                     "truth_field.csv", "clean_observations.csv"):
            assert (data / name).exists()
        meta = json.loads((data / "noise_meta.json").read_text())
        assert meta["eta"] > 0

        inv = tmp_path / "inv"
        assert run_cli("invert-reglm", "-c", SMOKE, "-o", inv, "--data", data) == 0
        assert (inv / "iterations.csv").exists()
        assert (inv / "estimate_field.csv").exists()
        assert (inv / "predicted_observations.csv").exists()
        header = (inv / "iterations.csv").read_text().splitlines()[0]
        assert header == "iteration,misfit,alpha,trials,rel_error,seconds"

    def test_self_synthesizing_invert(self, tmp_path):
        out = tmp_path / "inv"
        assert run_cli("invert-reglm", "-c", SMOKE, "-o", out) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["converged"] in (True, False)
        assert (out / "truth_field.csv").exists()

    def test_invert_stdlm_runs(self, tmp_path):
        out = tmp_path / "inv"
        assert run_cli("invert-stdlm", "-c", SMOKE, "-o", out) == 0
        header = (out / "iterations.csv").read_text().splitlines()[0]
        assert header.startswith("iteration,misfit,J,lambda,")

    def test_invert_outputs_deterministic(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli("invert-reglm", "-c", SMOKE, "-o", out1) == 0
        assert run_cli("invert-reglm", "-c", SMOKE, "-o", out2) == 0
        assert (out1 / "estimate_field.csv").read_bytes() == \
            (out2 / "estimate_field.csv").read_bytes()
        # timing column excluded: compare iteration rows without `seconds`
        strip = lambda p: [",".join(line.split(",")[:-1])
                           for line in (p / "iterations.csv").read_text().splitlines()]
        assert strip(out1) == strip(out2)


class TestStudy:
    def test_study_verb_runs_configured_study(self, tmp_path):
        out = tmp_path / "study"
        assert run_cli("study", "-c", SMOKE, "-o", out) == 0
        assert (out / "summary.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["study"] == "noise"
        assert manifest["points"] == ["f_0.05", "f_0.01"]

    def test_study_without_section_fails_cleanly(self, tmp_path):
        cfg = tmp_path / "case.toml"
        text = SMOKE.read_text().split("[study]")[0]
        cfg.write_text(text)
        assert run_cli("study", "-c", cfg, "-o", tmp_path / "o") == 1


class TestCheck:
    def test_check_passes_on_smoke_case(self, capsys):
        assert run_cli("check", "-c", SMOKE) == 0
        out = capsys.readouterr().out
        assert "[PASS] mass_balance" in out
        assert "[PASS] adjoint_vs_fd" in out
        assert "FAIL" not in out

    def test_check_report_file(self, tmp_path):
        out = tmp_path / "checks"
        assert run_cli("check", "-c", SMOKE, "-o", out) == 0
        assert (out / "checks.txt").exists()
