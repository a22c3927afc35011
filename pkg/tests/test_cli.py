import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from mtgpfuse import cli
from mtgpfuse import data as D

FAST = ["--anneal-steps", "15", "--max-iter", "15", "--threads", "2"]


@pytest.fixture(scope="module")
def tri(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tri.csv"
    cfg = D.FieldConfig(shape=(8, 6, 4), spacing=(1.0, 1.0, 1.0), observed_fraction=0.7, seed=5)
    D.write_csv(path, D.gen_correlated_field(cfg))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestTrain:
    def test_single_task_gpi(self, tri, tmp_path):
        out = tmp_path / "m.json"
        assert run("train", "--data", tri, "--tasks", "E1", "--kernel", "sqexp", "--mode", "gpi", "--out", out, *FAST) == 0
        arc = D.load_model(out)
        assert arc.kind == "gpi" and arc.names == ("E1",)
        assert (tmp_path / "m.report.jsonl").is_file()

    def test_ms_combination_is_deterministic(self, tri, tmp_path):
        outs = []
        for k in range(2):
            out = tmp_path / f"m{k}.json"
            rc = run("train", "--data", tri, "--tasks", "E1,E2,E3", "--kernel", "matern3,matern3,sqexp",
                     "--mode", "mtgp", "--restarts", "2", "--seed", "7", "--out", out, *FAST)
            assert rc == 0
            outs.append((out.read_bytes(), out.with_suffix(".report.jsonl").read_bytes()))
        assert outs[0] == outs[1]
        arc = D.load_model(tmp_path / "m0.json")
        assert [p.family.value for p in arc.params] == ["matern3", "matern3", "sqexp"]

    def test_kernel_count_mismatch(self, tri, tmp_path, capsys):
        rc = run("train", "--data", tri, "--tasks", "E1,E2", "--kernel", "sqexp", "--out", tmp_path / "m.json")
        assert rc == 2
        assert "kernel" in capsys.readouterr().err

    def test_unknown_kernel(self, tri, tmp_path):
        assert run("train", "--data", tri, "--tasks", "E1", "--kernel", "rbf", "--out", tmp_path / "m.json") == 2

    def test_unknown_flag(self):
        with pytest.raises(SystemExit) as exc:
            run("train", "--bogus")
        assert exc.value.code == 2

    def test_runtime_failure(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("east,north,depth,E1\n0,0,zz,1\n")
        assert run("train", "--data", bad, "--tasks", "E1", "--kernel", "sqexp", "--out", tmp_path / "m.json") == 1
        assert "row 2" in capsys.readouterr().err


class TestHelp:
    @pytest.mark.parametrize("sub,flags", [
        ("train", ["--data", "--tasks", "--kernel", "--mode", "--restarts", "--seed", "--threads"]),
        ("crossval", ["--block", "--folds", "--fit-first", "--dump-points", "--mtgp", "--gpi"]),
        ("demo", ["--gap-none", "--noise", "--n-dense", "--n-sparse"]),
        ("predict", ["--model", "--resolution", "--bbox", "--max-cells"]),
    ])
    def test_lists_flags(self, sub, flags, capsys):
        with pytest.raises(SystemExit) as exc:
            run(sub, "--help")
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert all(f in text for f in flags)


@pytest.fixture(scope="module")
def archives(tri, tmp_path_factory):
    d = tmp_path_factory.mktemp("models")
    common = ["--data", tri, "--tasks", "E1,E2,E3", "--kernel", "sqexp,sqexp,sqexp", *FAST]
    assert run("train", *common, "--mode", "mtgp", "--out", d / "mt.json") == 0
    assert run("train", *common, "--mode", "gpi", "--out", d / "gpi.json") == 0
    return d / "mt.json", d / "gpi.json"


class TestPredict:
    def test_grid(self, tri, archives, tmp_path):
        out = tmp_path / "grid.csv"
        assert run("predict", "--model", archives[0], "--data", tri, "--task", "E2", "--resolution", "4,3,2",
                   "--out", out) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "east,north,depth,mean,variance" and len(lines) == 25

    def test_gpi_archive(self, tri, archives, tmp_path):
        out = tmp_path / "grid.csv"
        assert run("predict", "--model", archives[1], "--data", tri, "--task", "E3", "--resolution", "2,2,2",
                   "--out", out) == 0
        assert len(out.read_text().splitlines()) == 9

    def test_missing_archive(self, tri, tmp_path):
        assert run("predict", "--model", tmp_path / "none.json", "--data", tri, "--out", tmp_path / "g.csv") == 2

    def test_too_fine(self, tri, archives, tmp_path):
        assert run("predict", "--model", archives[0], "--data", tri, "--resolution", "100,100,100",
                   "--max-cells", "1000", "--out", tmp_path / "g.csv") == 2


class TestCrossval:
    def test_two_blocks_two_reports(self, tri, archives, tmp_path):
        rc = run("crossval", "--data", tri, "--tasks", "E1,E2,E3", "--mtgp", archives[0], "--gpi", archives[1],
                 "--block", "1,1,1", "--block", "4,3,2", "--folds", "4", "--out-dir", tmp_path, "--dump-points")
        assert rc == 0
        for label in ("1x1x1", "4x3x2"):
            assert (tmp_path / f"cv_{label}.txt").is_file()
            doc = json.loads((tmp_path / f"cv_{label}.json").read_text())
            assert doc["folds"] == 4 and set(doc["stats"]) == {"MTGP", "GP", "GPI"}
            assert (tmp_path / f"points_{label}.csv").is_file()

    def test_deterministic(self, tri, archives, tmp_path):
        outs = []
        for k in range(2):
            d = tmp_path / f"r{k}"
            assert run("crossval", "--data", tri, "--tasks", "E1,E2,E3", "--mtgp", archives[0], "--gpi", archives[1],
                       "--block", "2,2,2", "--folds", "3", "--out-dir", d) == 0
            outs.append(sorted((p.name, p.read_bytes()) for p in d.iterdir()))
        assert outs[0] == outs[1]

    def test_fit_first(self, tri, tmp_path):
        rc = run("crossval", "--data", tri, "--tasks", "E1,E2", "--fit-first", "--kernel", "matern3,sqexp",
                 "--block", "3,3,3", "--folds", "3", "--out-dir", tmp_path, *FAST)
        assert rc == 0 and (tmp_path / "cv_3x3x3.json").is_file()

    def test_missing_archive(self, tri, archives, tmp_path):
        assert run("crossval", "--data", tri, "--tasks", "E1,E2,E3", "--mtgp", tmp_path / "nope.json",
                   "--gpi", archives[1], "--block", "1,1,1", "--out-dir", tmp_path) == 2
        assert run("crossval", "--data", tri, "--tasks", "E1,E2,E3", "--block", "1,1,1", "--out-dir", tmp_path) == 2

    def test_needs_block(self, tri, archives, tmp_path):
        assert run("crossval", "--data", tri, "--tasks", "E1,E2,E3", "--mtgp", archives[0], "--gpi", archives[1],
                   "--out-dir", tmp_path) == 2

    def test_bad_block_spec(self, tri, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run("crossval", "--data", tri, "--tasks", "E1", "--block", "1,1", "--out-dir", tmp_path)
        assert exc.value.code == 2


class TestDemo:
    def test_default_passes(self, tmp_path, capsys):
        assert run("demo", "--out-dir", tmp_path, "--threads", "1") == 0
        summary = (tmp_path / "demo_summary.txt").read_text()
        assert "variance_reduction: PASS" in summary
        with open(tmp_path / "demo_points.csv") as fh:
            assert fh.readline().strip() == "x,truth,mtgp_mean,mtgp_var,gpi_mean,gpi_var"

    def test_noise_free_full_coverage_interpolates(self, tmp_path):
        assert run("demo", "--out-dir", tmp_path, "--noise", "0", "--gap-none") == 0
        arr = np.loadtxt(tmp_path / "demo_points.csv", delimiter=",", skiprows=1)
        xs = arr[:, 0]
        a, b = D.gen_sine_demo(D.SineDemoConfig(noise=0.0, gap=None))
        inside = (xs >= b.points.min()) & (xs <= b.points.max())
        assert np.max(np.abs(arr[inside, 2] - arr[inside, 1])) < 1e-3
        assert np.max(np.abs(arr[inside, 4] - arr[inside, 1])) < 1e-3

    def test_rerun_identical(self, tmp_path):
        for k in range(2):
            assert run("demo", "--out-dir", tmp_path / str(k), "--seed", "3") == 0
        for name in ("demo_points.csv", "demo_summary.txt"):
            assert (tmp_path / "0" / name).read_bytes() == (tmp_path / "1" / name).read_bytes()


def test_console_script(tmp_path):
    exe = shutil.which("mtgp")
    cmd = [exe] if exe else [sys.executable, "-m", "mtgpfuse.cli"]
    res = subprocess.run(cmd + ["demo", "--out-dir", str(tmp_path), "--anneal-steps", "5", "--max-iter", "5"],
                         capture_output=True, text=True, env={**os.environ, "MTGP_LOG": "INFO"})
    assert res.returncode == 0, res.stderr
    assert "variance_reduction" in res.stdout
    assert "INFO" in res.stderr
