import csv
import subprocess
import sys

import pytest

from adatrans import harness
from adatrans.cli import main

SMALL = ["--set", "n_per_pop=30", "--set", "n_target=40", "--set", "d_x=4"]
FAST = ["--set", "n_samples=1", "--set", "restarts=1", "--set", "max_iter=15",
        "--set", "anchor_budget=30", "--set", "q_anchor_budget=20",
        "--set", "aux_anchor_budget=20", "--set", "aux_max_iter=15"]


class TestPipeline:
    def test_gen_fit_estimate_metrics(self, tmp_path, capsys):
        d = tmp_path / "data"
        assert main(["gen", "--deltas", "1.0,0.5", "--out", str(d), "--seed", "2"] + SMALL) == 0
        manifest = str(d / "manifest.txt")
        models = str(tmp_path / "m.npz")
        assert main(["fit", "--data", manifest, "--out", models, "--n-val", "10"] + FAST) == 0
        out = capsys.readouterr().out
        lam = [ln for ln in out.splitlines() if ln.startswith("lambda")][0]
        assert len(lam.split()) == 3      # name and two source values
        ite = str(tmp_path / "ite.csv")
        assert main(["estimate", "--models", models, "--x", manifest, "--samples", "5",
                     "--out", ite]) == 0
        with open(ite) as fh:
            assert len(list(csv.DictReader(fh))) == 40
        assert main(["metrics", "--ite", ite, "--data", manifest]) == 0
        assert "sqrt_pehe" in capsys.readouterr().out

    def test_experiment_and_summary(self, tmp_path, capsys):
        out = tmp_path / "exp"
        argv = ["experiment", "--mode", "synthetic-1src", "--policy", "adaptive,none",
                "--replicates", "1", "--out", str(out), "--set", "deltas=0.5",
                "--set", "n_train=15", "--set", "n_val=10", "--set", "n_test=0",
                "--set", "n_mc=5"] + SMALL + FAST
        assert main(argv) == 0
        assert main(["metrics", "--results", str(out / "results.csv")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert any(ln.startswith("0.5 none:") for ln in lines)

    def test_failed_cell_exit_code(self, tmp_path, monkeypatch):
        def boom(*a):
            raise RuntimeError("x")
        monkeypatch.setattr(harness, "run_cell", boom)
        assert main(["experiment", "--replicates", "1", "--out", str(tmp_path),
                     "--set", "deltas=0"]) == 3


class TestArguments:
    def test_bad_set(self):
        with pytest.raises(SystemExit):
            main(["experiment", "--set", "gamma"])

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            main(["experiment", "--set", "gama=1"])

    def test_console_script_help(self):
        r = subprocess.run([sys.executable, "-m", "adatrans.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "experiment" in r.stdout
