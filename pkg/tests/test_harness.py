"""Command-line harness: config handling, artifacts, exit codes."""

import json
import os

import numpy as np
import pytest

import icuda.harness as hz


def write_config(tmp_path, **kv):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kv))
    return str(path)


SMALL_IWL = dict(
    generator="shift1d", algo="iwl", seeds=[3, 1],
    gen_params={"n_source": 20, "n_target": 12, "n_eval": 30,
                "mu_target": 0.5, "boundary": 0.5},
    hyper={"J": 3, "L1": 6, "L2": 6},
)


class TestConfig:
    def test_defaults_validate(self):
        cfg = hz.load_config(None, {})
        assert cfg.generator == "shift1d"
        assert cfg.algo == "icuda"

    def test_unknown_key_rejected(self, tmp_path):
        path = write_config(tmp_path, generator="shift1d", extra=1)
        with pytest.raises(ValueError, match="unknown config keys"):
            hz.load_config(path, {})

    def test_unknown_generator_rejected(self, tmp_path):
        path = write_config(tmp_path, generator="circles")
        with pytest.raises(ValueError, match="unknown generator"):
            hz.load_config(path, {})

    def test_empty_seeds_rejected(self, tmp_path):
        path = write_config(tmp_path, seeds=[])
        with pytest.raises(ValueError, match="non-empty"):
            hz.load_config(path, {})

    def test_nonpositive_tolerance_rejected(self, tmp_path):
        path = write_config(tmp_path, tolerances={"gap": 0.0})
        with pytest.raises(ValueError, match="positive"):
            hz.load_config(path, {})

    def test_flag_overrides_file(self, tmp_path):
        path = write_config(tmp_path, algo="iwl", seeds=[5])
        cfg = hz.load_config(path, {"algo": "dann", "seeds": [9]})
        assert cfg.algo == "dann"
        assert cfg.seeds == [9]

    def test_hash_is_stable_and_sensitive(self):
        c1 = hz.ExperimentConfig(seeds=[1, 2])
        c2 = hz.ExperimentConfig(seeds=[1, 2])
        c3 = hz.ExperimentConfig(seeds=[1, 3])
        assert hz.config_hash(c1) == hz.config_hash(c2)
        assert hz.config_hash(c1) != hz.config_hash(c3)
        assert len(hz.config_hash(c1)) == 16

    def test_unknown_hyper_rejected(self):
        cfg = hz.ExperimentConfig(hyper={"learning_rate": 0.1})
        with pytest.raises(ValueError, match="unknown hyper"):
            hz.selector_config(cfg, 0)

    def test_sharpness_hyper_allowed(self):
        cfg = hz.ExperimentConfig(hyper={"a": 50.0, "beta": 100.0})
        scfg = hz.selector_config(cfg, 4)
        assert scfg.beta == 100.0
        assert scfg.seed == 4

    def test_accuracy_thresholds_at_half(self):
        scores = np.array([0.2, 0.5, 0.9, 0.49])
        labels = np.array([0.0, 1.0, 1.0, 1.0])
        assert hz._accuracy(scores, labels) == pytest.approx(0.75)


class TestGen:
    def test_writes_data_ratio_and_manifest(self, tmp_path):
        out = str(tmp_path / "runs")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        assert hz.main(["gen", "--config", cfg_path, "--out", out]) == 0
        manifest = json.loads((tmp_path / "runs" / "manifest.json").read_text())
        assert manifest["config_hash"]
        names = set(manifest["files"].values())
        assert "shift1d_seed1.csv" in names
        assert "shift1d_seed1_ratio.csv" in names
        for name in names:
            assert (tmp_path / "runs" / name).exists()

    def test_byte_identical_on_repeat(self, tmp_path):
        out = str(tmp_path / "runs")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        hz.main(["gen", "--config", cfg_path, "--out", out])
        first = {p.name: p.read_bytes()
                 for p in (tmp_path / "runs").iterdir()}
        hz.main(["gen", "--config", cfg_path, "--out", out])
        second = {p.name: p.read_bytes()
                  for p in (tmp_path / "runs").iterdir()}
        assert first == second

    def test_two_moon_has_no_ratio_sidecar(self, tmp_path):
        out = str(tmp_path / "m")
        cfg_path = write_config(tmp_path, generator="two_moon", algo="dann",
                                seeds=[0],
                                gen_params={"n_source": 10, "n_target": 10,
                                            "n_eval": 5})
        assert hz.main(["gen", "--config", cfg_path, "--out", out]) == 0
        names = os.listdir(out)
        assert not any("ratio" in n for n in names)


class TestRun:
    def test_reference_run_reports_accuracy(self, tmp_path):
        out = str(tmp_path / "runs")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        assert hz.main(["run", "--config", cfg_path, "--out", out]) == 0
        report = json.loads((tmp_path / "runs" / "run_iwl.json").read_text())
        assert report["algo"] == "iwl"
        assert len(report["records"]) == 2
        assert [r["seed"] for r in report["records"]] == [1, 3]
        assert 0.0 <= report["accuracy_mean"] <= 1.0
        csv_lines = (tmp_path / "runs" / "run_iwl.csv").read_text().splitlines()
        assert csv_lines[0] == "seed,algo,accuracy"
        assert len(csv_lines) == 3

    def test_report_reproducible_outside_timing(self, tmp_path):
        out = str(tmp_path / "runs")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        hz.main(["run", "--config", cfg_path, "--out", out])
        r1 = json.loads((tmp_path / "runs" / "run_iwl.json").read_text())
        hz.main(["run", "--config", cfg_path, "--out", out])
        r2 = json.loads((tmp_path / "runs" / "run_iwl.json").read_text())
        r1.pop("timing")
        r2.pop("timing")
        assert r1 == r2


class TestVerify:
    def test_passing_instance_exits_zero(self, tmp_path, capsys):
        out = str(tmp_path / "v")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        code = hz.main(["verify", "--config", cfg_path, "--out", out,
                        "--seed", "3"])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[-1].startswith("seed 3: pass")
        report = json.loads((tmp_path / "v" / "verify_iwl.json").read_text())
        assert report["all_pass"] is True
        rec = report["records"][0]
        assert rec["gap"] <= rec["bound"]

    def test_report_reproducible_outside_timing(self, tmp_path):
        out = str(tmp_path / "v")
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        hz.main(["verify", "--config", cfg_path, "--out", out, "--seed", "3"])
        r1 = json.loads((tmp_path / "v" / "verify_iwl.json").read_text())
        hz.main(["verify", "--config", cfg_path, "--out", out, "--seed", "3"])
        r2 = json.loads((tmp_path / "v" / "verify_iwl.json").read_text())
        r1.pop("timing")
        r2.pop("timing")
        assert r1 == r2

    def test_diverging_instance_exits_one(self, tmp_path, capsys):
        out = str(tmp_path / "v")
        bad = dict(SMALL_IWL)
        bad["hyper"] = dict(SMALL_IWL["hyper"], eta1=1e12, L1=60)
        cfg_path = write_config(tmp_path, **bad)
        code = hz.main(["verify", "--config", cfg_path, "--out", out,
                        "--seed", "3"])
        assert code == 1
        report = json.loads((tmp_path / "v" / "verify_iwl.json").read_text())
        assert report["all_pass"] is False
        assert "error" in report["records"][0]


class TestCli:
    def test_describe_prints_structure(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, **SMALL_IWL)
        assert hz.main(["describe", "--config", cfg_path, "--seed", "3"]) == 0
        info = json.loads(capsys.readouterr().out)
        assert info["algo"] == "iwl"
        assert info["num_layers"] > 0
        assert info["tf_norm"] > 0

    def test_config_error_exits_two(self, tmp_path):
        cfg_path = write_config(tmp_path, generator="circles")
        assert hz.main(["run", "--config", cfg_path]) == 2

    def test_missing_config_file_exits_two(self, tmp_path):
        assert hz.main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_usage_error_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            hz.main([])
        assert exc.value.code == 2
        with pytest.raises(SystemExit) as exc:
            hz.main(["verify", "--algo", "bogus"])
        assert exc.value.code == 2

    def test_build_params_may_repeat_pinned_fields(self, tmp_path):
        cfg = hz.load_config(
            write_config(tmp_path, **dict(SMALL_IWL,
                                          build_params={"J": 5,
                                                        "grad_knots": 80})),
            {})
        scfg = hz.selector_config(cfg, 3)
        bcfg = hz._iwl_build_config(cfg, scfg, 1)
        assert bcfg.J == 3
        assert bcfg.grad_knots == 80
