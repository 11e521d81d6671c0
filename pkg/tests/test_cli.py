import json
import os

import numpy as np
import pytest

from swflow import cli, validation
from swflow import discrepancy as dsc
from swflow.geometry import load_mesh


@pytest.fixture
def meshes(tmp_path):
    assert cli.main(["synth", "sphere", "--subdivisions", "2", "--out", str(tmp_path / "src")]) == 0
    assert cli.main(["synth", "ellipsoid(1.2,0.9,1.0)", "--subdivisions", "2", "--out", str(tmp_path / "tgt")]) == 0
    return tmp_path / "src" / "synth.obj", tmp_path / "tgt" / "synth.obj"


def manifest(d):
    return json.loads((d / "manifest.json").read_text())


def no_staging_left(parent):
    return not [p for p in os.listdir(parent) if ".staging-" in p]


class TestSynth:
    def test_vertex_count(self, tmp_path):
        assert cli.main(["synth", "sphere", "--subdivisions", "2", "--out", str(tmp_path / "o")]) == 0
        assert load_mesh(tmp_path / "o" / "synth.obj").n_vertices == 162

    def test_same_seed_identical(self, tmp_path):
        for d in ("a", "b"):
            cli.main(["synth", "perturbed-sphere", "--seed", "4", "--out", str(tmp_path / d)])
        assert (tmp_path / "a" / "synth.obj").read_bytes() == (tmp_path / "b" / "synth.obj").read_bytes()

    def test_unknown_shape(self, tmp_path, capsys):
        assert cli.main(["synth", "cube", "--out", str(tmp_path / "o")]) == 1
        assert "unknown shape" in capsys.readouterr().err
        assert not (tmp_path / "o").exists()

    def test_ply(self, tmp_path):
        assert cli.main(["synth", "sphere", "--subdivisions", "1", "--name", "m.ply", "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "m.ply").read_text().startswith("ply\n")


class TestRegister:
    def test_affine_outputs(self, tmp_path, meshes):
        out = tmp_path / "aff"
        code = cli.main(["register", "affine", str(meshes[0]), str(meshes[1]), "--preset", "left-ventricle", "--out", str(out)])
        assert code == 0
        man = manifest(out)
        assert man["config"]["flow"]["n_steps"] == 1500
        assert set(man["outputs"]) == {"history.csv", "history.dat", "registered.obj", "transform.txt"}
        assert man["timing_outputs"] == ["timings.csv"]
        assert len((out / "history.csv").read_text().splitlines()) == 1501
        assert load_mesh(out / "registered.obj").n_vertices == 162

    def test_nonrigid_preset_schedule(self):
        cfg = cli.resolve_config("nonrigid", {"preset": "liver"}, None)
        assert (cfg.n_swd, cfg.n_chamfer) == (500, 200)
        assert (cfg.lr_swd, cfg.lr_chamfer) == (0.5, 0.1)

    def test_nonrigid_with_config_file(self, tmp_path, meshes):
        conf = tmp_path / "run.cfg"
        conf.write_text(
            f"# small run\nsource = {meshes[0]}\ntarget = {meshes[1]}\nout = {tmp_path / 'nr'}\n"
            "n_swd = 10\nn_chamfer = 5\nlambda_lap = 1.5\nseed = 3\n"
        )
        assert cli.main(["register", "nonrigid", "--config", str(conf)]) == 0
        man = manifest(tmp_path / "nr")
        assert man["config"]["n_swd"] == 10 and man["config"]["objective"]["lambda_lap"] == 1.5
        assert man["seed"] == 3
        disp = np.loadtxt(tmp_path / "nr" / "displacements.csv", delimiter=",", skiprows=1)
        assert disp.shape == (162, 4)

    def test_json_config_and_flag_override(self, tmp_path, meshes):
        conf = tmp_path / "run.json"
        conf.write_text(json.dumps({"n_steps": 7, "method": "wgf", "lr": 0.1, "seed": 1}))
        out = tmp_path / "o"
        args = ["register", "affine", str(meshes[0]), str(meshes[1]), "--config", str(conf), "--seed", "9", "--out", str(out)]
        assert cli.main(args) == 0
        man = manifest(out)
        assert man["config"]["flow"]["method"] == "wgf" and man["config"]["flow"]["n_steps"] == 7
        assert man["seed"] == 9

    def test_missing_target(self, tmp_path, meshes, capsys):
        out = tmp_path / "bad"
        assert cli.main(["register", "affine", str(meshes[0]), str(tmp_path / "nope.obj"), "--out", str(out)]) == 1
        assert "no such file" in capsys.readouterr().err
        assert not out.exists() and no_staging_left(tmp_path)

    def test_unknown_config_key(self, tmp_path, meshes):
        conf = tmp_path / "c.cfg"
        conf.write_text("learning_rate = 3\n")
        args = ["register", "affine", str(meshes[0]), str(meshes[1]), "--config", str(conf), "--out", str(tmp_path / "o")]
        assert cli.main(args) == 1

    def test_bad_config_value(self, tmp_path, meshes):
        conf = tmp_path / "c.cfg"
        conf.write_text("alpha = 1.5\n")
        args = ["register", "affine", str(meshes[0]), str(meshes[1]), "--config", str(conf), "--out", str(tmp_path / "o")]
        assert cli.main(args) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort(self, tmp_path, meshes, capsys):
        conf = tmp_path / "c.cfg"
        conf.write_text("method = wgf\nlr = 1e300\nn_steps = 20\n")
        out = tmp_path / "o"
        args = ["register", "affine", str(meshes[0]), str(meshes[1]), "--config", str(conf), "--out", str(out)]
        assert cli.main(args) == 2
        assert "numerical abort" in capsys.readouterr().err
        assert not out.exists() and no_staging_left(tmp_path)

    def test_malformed_mesh(self, tmp_path, meshes):
        bad = tmp_path / "quad.obj"
        bad.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        assert cli.main(["register", "affine", str(meshes[0]), str(bad), "--out", str(tmp_path / "o")]) == 1

    def test_missing_out(self, meshes):
        assert cli.main(["register", "affine", str(meshes[0]), str(meshes[1])]) == 1

    def test_out_parent_missing(self, tmp_path, meshes):
        args = ["register", "affine", str(meshes[0]), str(meshes[1]), "--out", str(tmp_path / "x" / "y")]
        assert cli.main(args) == 1

    def test_bad_flag(self):
        assert cli.main(["register", "sideways"]) == 1

    def test_threads_flag_matches_single_thread(self, tmp_path, meshes):
        outs = []
        for t in ("1", "3"):
            out = tmp_path / f"t{t}"
            cli.main(["register", "nonrigid", str(meshes[0]), str(meshes[1]), "--threads", t, "--out", str(out)])
            outs.append((out / "registered.obj").read_bytes())
        assert outs[0] == outs[1]


def test_env_thread_fallback(monkeypatch):
    monkeypatch.setenv("SWFLOW_THREADS", "3")
    assert dsc.default_workers() == 3
    monkeypatch.setenv("SWFLOW_THREADS", "junk")
    assert dsc.default_workers() == 1


class TestEvaluate:
    def test_identical(self, tmp_path, meshes, capsys):
        out = tmp_path / "ev"
        assert cli.main(["evaluate", str(meshes[0]), str(meshes[0]), "--n", "2000", "--out", str(out)]) == 0
        row = (out / "errors.csv").read_text().splitlines()[1].split(",")
        assert float(row[2]) == 0.0 and float(row[3]) == 0.0 and row[4] == "2000"

    def test_default_samples(self):
        args = cli.build_parser().parse_args(["evaluate", "a", "b"])
        assert args.n == 50_000

    def test_seed_changes_only_noise(self, tmp_path, meshes):
        vals = []
        for seed in ("1", "2"):
            out = tmp_path / f"e{seed}"
            cli.main(["evaluate", str(meshes[0]), str(meshes[1]), "--seed", seed, "--out", str(out)])
            vals.append(float((out / "errors.csv").read_text().splitlines()[1].split(",")[2]))
        assert vals[0] != vals[1]
        assert abs(vals[0] - vals[1]) / vals[0] < 0.05


class TestBench:
    def test_rows_per_metric(self, tmp_path):
        out = tmp_path / "b"
        assert cli.main(["bench", "--metric", "swd", "icp", "--repeats", "1", "--out", str(out)]) == 0
        rows = (out / "bench.csv").read_text().splitlines()
        assert rows[0] == "metric,mode,N,L,mean_ms,std_ms"
        assert sum(r.startswith("swd,value,") for r in rows) == 10
        assert [int(r.split(",")[2]) for r in rows[1:11]] == list(range(5000, 50001, 5000))
        assert all(float(r.split(",")[5]) == 0.0 for r in rows[1:])

    def test_step_mode(self, tmp_path):
        out = tmp_path / "b"
        argv = ["bench", "--metric", "swd", "--mode", "step", "--sizes", "100,200", "--repeats", "2", "--out", str(out)]
        assert cli.main(argv) == 0
        rows = (out / "bench.csv").read_text().splitlines()
        assert [r.split(",")[:3] for r in rows[1:]] == [["swd", "step", "100"], ["swd", "step", "200"]]

    def test_bad_sizes(self, tmp_path):
        assert cli.main(["bench", "--sizes", "10,abc", "--out", str(tmp_path / "b")]) == 1


class TestVerify:
    def test_clean(self, capsys):
        assert cli.main(["verify"]) == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_injected_bug(self, monkeypatch, capsys):
        monkeypatch.setitem(validation.DEFAULT_IMPL, "swd_gradient",
                            lambda s, t, p: 1.01 * dsc.swd_gradient(s, t, p))
        assert cli.main(["verify"]) != 0
        assert "FAIL" in capsys.readouterr().out


class TestReplay:
    def test_identical(self, tmp_path, meshes):
        out = tmp_path / "r"
        cli.main(["register", "nonrigid", str(meshes[0]), str(meshes[1]), "--seed", "5", "--out", str(out)])
        assert cli.main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r2")]) == 0
        for name in manifest(out)["outputs"]:
            assert (out / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()

    def test_mismatch_detected(self, tmp_path, meshes):
        out = tmp_path / "r"
        cli.main(["synth", "perturbed-sphere", "--out", str(out)])
        man = manifest(out)
        man["outputs"]["synth.obj"] = "0" * 64
        (out / "manifest.json").write_text(json.dumps(man))
        assert cli.main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / "r2")]) == 3

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        assert cli.main(["replay", str(tmp_path / "m.json")]) == 1


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "swflow", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.strip() == "0.1.0"
