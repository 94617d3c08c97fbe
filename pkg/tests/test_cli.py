"""Config validation, exit codes, manifests, reproducibility, bench."""

import hashlib
import json
import os
import subprocess
import sys

import pytest

from enstrophy_lab.cli import BATTERY_BUILDERS, ConfigError, bench, load_config, main, run


def write_cfg(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


QUICK = {
    "seed": 7,
    "tests": [
        {"name": "wick_mean", "params": {"N": 2, "M": 2000, "kernel": "rank_one", "phi": "cos_x1"}},
        {"name": "dirichlet_kernel", "params": {"N_list": [2], "G": 16}},
    ],
}


class TestConfigValidation:
    def test_unknown_battery_named(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 1, "tests": [{"name": "bogus"}]})
        assert run(cfg, out_dir=str(tmp_path / "out")) == 2

    def test_fractional_steps_named_field(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", {
            "seed": 1,
            "tests": [{"name": "invariance",
                       "params": {"N": 2, "M": 50, "T": 0.25, "dt": 0.013}}],
        })
        assert run(cfg, out_dir=str(tmp_path / "out")) == 2
        err = capsys.readouterr().err
        assert "tests[0].params" in err

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        assert run(str(path), out_dir=str(tmp_path / "out")) == 2

    def test_missing_file(self, tmp_path):
        assert run(str(tmp_path / "absent.json")) == 2

    def test_wrong_param_type(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {
            "seed": 1,
            "tests": [{"name": "wick_mean", "params": {"N": "four"}}],
        })
        assert run(cfg, out_dir=str(tmp_path / "out")) == 2

    def test_load_config_reports_field(self, tmp_path):
        path = write_cfg(tmp_path / "c.json", {"seed": "x"})
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.field == "seed"


class TestRun:
    def test_empty_selection(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 1, "tests": []})
        out = tmp_path / "out"
        assert run(cfg, out_dir=str(out)) == 0
        assert (out / "summary.csv").read_text() == "name,passed\n"
        manifest = json.loads((out / "manifest.json").read_text())
        assert "summary.csv" in manifest["files"]

    def test_reports_and_manifest(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", QUICK)
        out = tmp_path / "out"
        assert run(cfg, out_dir=str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        for name, digest in manifest["files"].items():
            data = (out / name).read_bytes()
            assert hashlib.sha256(data).hexdigest() == digest
        assert manifest["seed"] == 7
        summary = (out / "summary.csv").read_text().splitlines()
        assert summary[0] == "name,passed"
        assert len(summary) == 3

    def test_byte_identical_reruns(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", QUICK)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run(cfg, out_dir=str(out1)) == 0
        assert run(cfg, out_dir=str(out2)) == 0
        for name in os.listdir(out1):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_seed_override_changes_estimates(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", QUICK)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run(cfg, out_dir=str(out1))
        run(cfg, out_dir=str(out2), seed_override=99)
        a = json.loads((out1 / "wick_mean.json").read_text())
        b = json.loads((out2 / "wick_mean.json").read_text())
        assert a["summary"]["mc_mean"] != b["summary"]["mc_mean"]
        assert b["seed"] == 99

    def test_battery_failure_exits_one_and_preserves_artifacts(self, tmp_path):
        # a negative control without an actual drift shift must fail
        cfg = write_cfg(tmp_path / "c.json", {
            "seed": 3,
            "tests": [
                {"name": "wick_mean", "params": {"N": 2, "M": 2000, "kernel": "rank_one", "phi": "cos_x1"}},
                {"name": "invariance_negative",
                 "params": {"N": 2, "M": 200, "T": 0.1, "dt": 0.01,
                            "observables": ["cos_x1"], "shift_amp": 0.0}},
            ],
        })
        out = tmp_path / "out"
        assert run(cfg, out_dir=str(out)) == 1
        summary = (out / "summary.csv").read_text()
        assert "invariance_negative,false" in summary
        assert "wick_mean,true" in summary
        assert (out / "wick_mean.json").exists()


class TestBundledConfig:
    def test_quickcheck_resource_parses(self):
        import importlib.resources as res

        with res.as_file(res.files("enstrophy_lab") / "configs" / "quickcheck.cfg") as p:
            cfg = load_config(str(p))
        assert cfg["tests"]
        assert all(t["name"] in BATTERY_BUILDERS for t in cfg["tests"])


class TestBench:
    def test_bench_writes_table(self, tmp_path):
        assert bench(max_n=4, out_dir=str(tmp_path)) == 0
        lines = (tmp_path / "throughput.csv").read_text().splitlines()
        assert lines[0] == "N,grid,direct_evals_per_s,dealiased_evals_per_s,rel_dev"
        assert len(lines) == 3  # N = 2, 4


class TestMain:
    def test_cli_entry_run(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"seed": 1, "tests": []})
        assert main(["run", cfg, "--out-dir", str(tmp_path / "out")]) == 0

    def test_cli_entry_bench(self, capsys):
        assert main(["bench", "--max-n", "2"]) == 0
        assert "dealiased/s" in capsys.readouterr().out
