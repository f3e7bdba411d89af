import csv
import json
import subprocess
import sys

import pytest

from immp.cli import main

SMALL = {
    "exactness": '[run]\nreplicas = 4000\nsteps = 3\n[params]\nunadjusted_steps = 3\n',
    "spectral-verify": (
        '[run]\nsteps = 500\nreplicas = 2\n[model]\nN = 16\n'
        '[params]\nmoment_samples = 4000\nnormality_N = 32\nnormality_samples = 500\nasymptotic_N = 64\n'
    ),
    "test2-stability": (
        '[run]\nreplicas = 8\n[model]\ninteraction = "harmonic"\nexternal = false\n'
        '[params]\nN_grid = [16, 32]\ndt_points = 31\n'
    ),
    "test1-macro": (
        '[run]\nreplicas = 2\n[model]\nN = 10\n'
        '[params]\nN_grid = [10]\nburn_time = 0.05\neq_time = 0.2\nrelax_time = 0.05\nmax_lag = 0.02\n'
        'verlet_dt = 2e-4\ndt_grid = [1e-3]\n'
    ),
    "stiff-demo": '[run]\nreplicas = 50\nsteps = 10\n[params]\neps_list = [0.1, 0.01]\n',
    "tune": '[run]\nreplicas = 8\nsteps = 3\n[model]\nN = 16\n[params]\ndt_points = 8\nnubar_grid = [0.0, 0.3]\n',
}


def _config(tmp_path, name):
    p = tmp_path / f"{name}.toml"
    p.write_text(SMALL[name])
    return str(p)


@pytest.mark.parametrize("name", sorted(SMALL))
def test_subcommand_writes_outputs(tmp_path, name):
    out = tmp_path / "res" / name
    code = main([name, "--config", _config(tmp_path, name), "--seed", "5", "--out", str(out)])
    assert code == 0
    with open(f"{out}.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["experiment", "group", "x", "y", "yerr"]
    assert len(rows) > 1 and all(r[0] == name for r in rows[1:])
    meta = json.loads(open(f"{out}.json").read())
    assert meta["seed"] == 5 and meta["experiment"] == name
    assert meta["config"]["run"]["seed"] == 5
    assert set(meta) >= {"git_commit", "wall_time_s", "summary", "checks", "passed"}


def test_same_seed_gives_identical_csv(tmp_path):
    cfg = _config(tmp_path, "stiff-demo")
    a, b = tmp_path / "a", tmp_path / "b"
    main(["stiff-demo", "--config", cfg, "--seed", "7", "--out", str(a)])
    main(["stiff-demo", "--config", cfg, "--seed", "7", "--out", str(b), "--threads", "2"])
    assert open(f"{a}.csv", "rb").read() == open(f"{b}.csv", "rb").read()
    main(["stiff-demo", "--config", cfg, "--seed", "8", "--out", str(b)])
    assert open(f"{a}.csv", "rb").read() != open(f"{b}.csv", "rb").read()


def test_threads_do_not_change_results(tmp_path):
    cfg = _config(tmp_path, "test2-stability")
    a, b = tmp_path / "a", tmp_path / "b"
    main(["test2-stability", "--config", cfg, "--out", str(a), "--threads", "1"])
    main(["test2-stability", "--config", cfg, "--out", str(b), "--threads", "3"])
    assert open(f"{a}.csv", "rb").read() == open(f"{b}.csv", "rb").read()


def test_check_flag_sets_exit_status(tmp_path):
    # an unreachable acceptance target makes the tune check fail
    p = tmp_path / "t.toml"
    p.write_text(SMALL["tune"] + "target = 0.999999\ndt_min = 0.5\n")
    out = str(tmp_path / "t")
    assert main(["tune", "--config", str(p), "--out", out]) == 0
    assert main(["tune", "--config", str(p), "--out", out, "--check"]) == 1
    assert main(["tune", "--config", _config(tmp_path, "tune"), "--out", out, "--check"]) == 0


def test_config_errors_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[run]\nbogus = 1\n")
    assert main(["tune", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "immp", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for name in SMALL:
        assert name in r.stdout
