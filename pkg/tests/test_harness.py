import json
import math

import numpy as np
import pytest

from mfgmm import harness
from mfgmm.errors import ConfigError, NumericalError
from mfgmm.harness import (
    DEFAULT_FLAGS,
    ExperimentConfig,
    critical_point_ok,
    main,
    report,
    resolve_threads,
    run,
    stage_rng,
)

K1 = {
    "scenario": "full-pipeline",
    "mixture": {"K": 1, "P": 1, "N": 6, "beta": 1.0, "seed": 0},
    "truth": {"weights": [1.0], "means": [[0.0]], "precisions": [[[1.0]]]},
    "priors": {"R": 5.0, "a": 0.01, "sigma_k": 100.0, "dirichlet_alpha": 1.0},
    "flags": {"l0": 0.3, "convexity_geodesics": 5, "convexity_sampler": "tube", "p1_random_A": 3},
}

K2 = {
    "scenario": "landscape",
    "mixture": {"K": 2, "P": 1, "N": 10, "beta": 1.0, "seed": 0},
    "truth": {"weights": [0.5, 0.5], "means": [[-2.0], [2.0]], "precisions": [[[1.0]], [[1.0]]]},
    "priors": {"R": 5.0, "a": 0.01, "sigma_k": 100.0, "dirichlet_alpha": 1.0},
    "flags": {"l0": 0.3},
}


def _write(tmp_path, cfg, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


@pytest.fixture(scope="module")
def k1_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("k1")
    return out, run(ExperimentConfig.from_dict(K1), out)


class TestConfig:
    def test_defaults_are_explicit(self):
        cfg = ExperimentConfig.from_dict(K1)
        assert set(cfg.flags) == set(DEFAULT_FLAGS)
        assert cfg.flags["cavi_tol"] == DEFAULT_FLAGS["cavi_tol"]

    def test_unknown_field_named(self):
        bad = dict(K1, flags={"lattice_strid": 2})
        with pytest.raises(ConfigError, match="lattice_strid"):
            ExperimentConfig.from_dict(bad)

    def test_shape_mismatch_named(self):
        bad = dict(K1, truth={"weights": [0.5, 0.5], "means": [[0.0]], "precisions": [[[1.0]]]})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(bad)

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError, match="scenario"):
            ExperimentConfig.from_dict(dict(K1, scenario="plot"))

    def test_hash_stable_and_sensitive(self):
        a = ExperimentConfig.from_dict(K1).config_hash()
        assert a == ExperimentConfig.from_dict(json.loads(json.dumps(K1))).config_hash()
        assert a != ExperimentConfig.from_dict(dict(K1, flags={"l0": 0.4})).config_hash()


class TestSeeding:
    def test_stage_streams_independent(self):
        a = stage_rng(0, "cavi").random(4)
        assert np.array_equal(a, stage_rng(0, "cavi").random(4))
        assert not np.array_equal(a, stage_rng(0, "landscape").random(4))
        assert not np.array_equal(a, stage_rng(0, "cavi", worker=1).random(4))

    def test_threads_fallback(self, monkeypatch):
        monkeypatch.setenv("MFGMM_THREADS", "3")
        assert resolve_threads(None) == 3
        assert resolve_threads(2) == 2
        monkeypatch.delenv("MFGMM_THREADS")
        assert resolve_threads(None) == 1
        monkeypatch.setenv("MFGMM_THREADS", "many")
        with pytest.raises(ConfigError):
            resolve_threads(None)


class TestRun:
    def test_k1_full_pipeline_passes(self, k1_run):
        _, man = k1_run
        assert set(man.stages) == set(harness.STAGES)
        assert all(s["status"] == "ok" for s in man.stages.values())
        verdicts = [s["pass"] for s in man.stages.values() if "pass" in s]
        assert len(verdicts) == 3 and all(verdicts)
        assert man.stages["concentration"]["nonincreasing"]

    def test_manifest_records_flags_and_hashes(self, k1_run):
        out, man = k1_run
        d = json.loads((out / "manifest.json").read_text())
        assert d["flags"] == man.flags and set(d["timings"]) == set(harness.STAGES)
        for stage, files in d["outputs"].items():
            for f in files:
                assert (out / f["file"]).exists() and len(f["sha256"]) == 64

    def test_csv_headers(self, k1_run):
        out, _ = k1_run
        for p in out.glob("*.csv"):
            header = p.read_text().splitlines()[0].split(",")
            with pytest.raises(ValueError):
                [float(h) for h in header]

    def test_rerun_is_byte_identical(self, k1_run, tmp_path):
        out, man = k1_run
        man2 = run(ExperimentConfig.from_dict(K1), tmp_path)
        assert man2.outputs == man.outputs
        assert man2.config_hash == man.config_hash

    def test_budget_error_names_cardinality(self, tmp_path):
        cfg = ExperimentConfig.from_dict(dict(K2, flags={"l0": 0.3, "lattice_budget": 10}))
        _, truth = harness._Context(cfg, tmp_path, 1).data()
        n1, n2 = truth.class_sizes
        size = math.comb(n1 + 1, 1) * math.comb(n2 + 1, 1)
        with pytest.raises(harness.BudgetError, match=f"lattice has {size} cells"):
            run(cfg, tmp_path)


class TestReport:
    def test_full_pipeline_has_six_sections(self, k1_run):
        out, _ = k1_run
        s = report(out / "manifest.json")
        assert not s["errors"]
        for stage in harness.STAGES:
            assert isinstance(s[stage], dict) and s[stage]["status"] == "ok"
        assert s["cavi"]["residual_trace"] and "C_hat" in s["convexity"]
        assert "vertex_verdict" in s["p1-check"]
        md = harness.report_markdown(s)
        assert all(f"## {st}" in md for st in harness.STAGES)

    def test_landscape_only_marks_not_run(self, tmp_path):
        run(ExperimentConfig.from_dict(K2), tmp_path)
        s = report(tmp_path / "manifest.json")
        assert s["landscape"]["status"] == "ok" and s["landscape"]["A_star"]
        for stage in ("convexity", "cavi", "p1-check", "concentration"):
            assert s[stage] == "not run"

    def test_corrupted_csv_names_file_and_row(self, tmp_path):
        run(ExperimentConfig.from_dict(K2), tmp_path)
        p = tmp_path / "landscape.csv"
        lines = p.read_text().splitlines()
        lines[4] = "1,2,3"
        p.write_text("\n".join(lines) + "\n")
        s = report(tmp_path / "manifest.json")
        assert s["landscape"]["status"] == "corrupt"
        assert any("landscape.csv: row 5 " in e for e in s["errors"])

    def test_missing_output_listed(self, tmp_path):
        run(ExperimentConfig.from_dict(K2), tmp_path)
        (tmp_path / "landscape.csv").unlink()
        s = report(tmp_path / "manifest.json")
        assert s["landscape"]["status"] == "missing outputs"
        assert s["errors"]


def test_critical_point_floor():
    assert critical_point_ok(1e-12, 0.0)
    assert not critical_point_ok(1e-3, 1.0)
    assert critical_point_ok(1e-5, 1.0)


class TestCli:
    def test_exit_codes(self, tmp_path, monkeypatch, capsys):
        assert main(["generate", "--config", str(tmp_path / "absent.json")]) == 2
        bad = _write(tmp_path, dict(K2, flags={"nope": 1}))
        assert main(["landscape", "--config", str(bad)]) == 2
        tight = _write(tmp_path, dict(K2, flags={"lattice_budget": 3}), "tight.json")
        assert main(["landscape", "--config", str(tight), "--out", str(tmp_path / "o")]) == 3

        def boom(ctx):
            raise NumericalError("forced")
        monkeypatch.setitem(harness.STAGE_FUNCS, "landscape", boom)
        ok = _write(tmp_path, K2, "ok.json")
        assert main(["landscape", "--config", str(ok), "--out", str(tmp_path / "o2")]) == 4
        assert "forced" in capsys.readouterr().err

    def test_scenario_and_report(self, tmp_path, capsys):
        cfg = _write(tmp_path, K2)
        out = tmp_path / "run"
        assert main(["landscape", "--config", str(cfg), "--out", str(out), "--seed", "1", "--threads", "1"]) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 1
        capsys.readouterr()
        assert main(["report", "--manifest", str(out / "manifest.json"), "--format", "markdown"]) == 0
        assert "## landscape" in capsys.readouterr().out

    def test_direct_subcommands(self, tmp_path):
        cfg = _write(tmp_path, dict(K2, scenario="generate"))
        gen = tmp_path / "gen"
        assert main(["generate", "--config", str(cfg), "--out", str(gen)]) == 0
        state = tmp_path / "state.json"
        assert main(["cavi", "--config", str(cfg), "--data", str(gen / "data.csv"), "--laplace",
                     "--out", str(state)]) == 0
        assert json.loads(state.read_text())["backend"] == "laplace"

        rec = tmp_path / "records.csv"
        assert main(["landscape", "--truth", str(gen / "truth.json"), "--priors", str(gen / "priors.json"),
                     "--lattice", "3,3", "--out", str(rec)]) == 0
        assert len(rec.read_text().splitlines()) == 1 + 16
        assert main(["landscape", "--truth", str(gen / "truth.json"), "--lattice", "3,x"]) == 2

        A = tmp_path / "A.json"
        A.write_text(json.dumps({"A": [[0.8, 0.3], [0.2, 0.7]]}))
        rep = tmp_path / "p1.json"
        assert main(["p1-check", "--truth", str(gen / "truth.json"), "--priors", str(gen / "priors.json"),
                     "--A", str(A), "--out", str(rep)]) == 0
        case = json.loads(rep.read_text())["cases"][0]
        assert case["delta_means"] <= 1e-6 and case["delta_precisions"] <= 1e-6
        A.write_text(json.dumps({"A": [[0.8, 0.3], [0.3, 0.7]]}))
        assert main(["p1-check", "--truth", str(gen / "truth.json"), "--A", str(A), "--out", str(rep)]) == 2
