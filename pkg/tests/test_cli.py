import json
import os

import pytest

from rwre.cli import main


def write_cfg(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


def test_gen_env_round_trip(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 0.5, "b": 1.5},
                        "d": 1, "L": 32, "seed": 4},
    })
    out = str(tmp_path / "out")
    assert main(["gen-env", "--config", cfg, "--out", out]) == 0
    from rwre.env import load_environment
    env = load_environment(os.path.join(out, "environment.json"))
    assert env.L == 32 and env.n_bonds == 64
    manifest = read_manifest(out)
    assert set(manifest["outputs"]) == {"environment.json", "summary.json"}
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert 0.8 < summary["harmonic_kappa"] < 1.05


def test_kernel_compare_sweep_decreases(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 0.5, "b": 1.5},
                        "d": 1, "L": 64, "seed": 1},
        "l_sweep": [64, 128, 256],
        "grid_m": 65,
    })
    out = str(tmp_path / "kc")
    assert main(["kernel-compare", "--config", cfg, "--out", out]) == 0
    rows = [line.split(",") for line in
            open(os.path.join(out, "kernel_compare.csv")).read().splitlines()[1:]]
    hs = [float(r[2]) for r in rows]
    assert all(hs[i + 1] < hs[i] for i in range(len(hs) - 1))


def test_kappa_estimators_agree(tmp_path):
    t_max = 0.05 * 128**2
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 0.5, "b": 1.5},
                        "d": 1, "L": 128, "seed": 11},
        "t_grid": {"start": t_max / 12, "stop": t_max, "num": 12},
        "ensemble": 30000,
        "fit_window": [0.3 * t_max, t_max],
    })
    out = str(tmp_path / "kap")
    assert main(["kappa", "--config", cfg, "--out", out]) == 0
    result = json.loads(open(os.path.join(out, "kappa.json")).read())
    h, s, m = result["harmonic"], result["spectral"], result["msd"]
    assert abs(s / h - 1) < 0.05
    assert abs(m / h - 1) < 0.05


def test_walk_outputs(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "constant", "params": {"rate": 1.0},
                        "d": 1, "L": 64, "seed": 2},
        "t_grid": {"start": 10, "stop": 100, "num": 8},
        "ensemble": 2000,
    })
    out = str(tmp_path / "walk")
    assert main(["walk", "--config", cfg, "--out", out]) == 0
    manifest = read_manifest(out)
    assert "msd.csv" in manifest["outputs"]
    assert "occupancy_t7.csv" in manifest["outputs"]
    fit = json.loads(open(os.path.join(out, "fit.json")).read())
    assert fit["kappa"] == pytest.approx(1.0, rel=0.1)


def test_dipole_report(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "constant", "params": {}, "d": 2, "L": 6, "seed": 0},
        "decay_distances": [4, 8, 16],
    })
    out = str(tmp_path / "dip")
    assert main(["dipole", "--config", cfg, "--out", out]) == 0
    rep = json.loads(open(os.path.join(out, "dipole.json")).read())
    assert rep["projector_residual"] < 1e-10
    assert rep["trace"] == pytest.approx(121.0, abs=1e-6)
    assert -2.5 < rep["decay"]["loglog_slope"] < -1.5


def test_bounds_report(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "bounded_perturbation",
                        "params": {"mean": 1.0, "delta": 0.1}, "d": 1, "L": 8, "seed": 5},
        "n_env": 40, "n_vectors": 10,
        "geometric_constant": 0.5,
    })
    out = str(tmp_path / "bounds")
    assert main(["bounds", "--config", cfg, "--out", out]) == 0
    rep = json.loads(open(os.path.join(out, "bounds.json")).read())
    assert rep["schwarz"]["worst_margin_sample"] >= -1e-8
    assert rep["theta"]["kappa"] < 1.0
    assert rep["series_bound"]["kl_bound"] > 0


def test_rerun_is_byte_identical_except_manifest_clock(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 0.5, "b": 1.5},
                        "d": 1, "L": 32, "seed": 9},
        "t_grid": {"start": 5, "stop": 40, "num": 6},
        "ensemble": 1000,
    })
    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(["walk", "--config", cfg, "--out", out1]) == 0
    assert main(["walk", "--config", cfg, "--out", out2]) == 0
    for name in read_manifest(out1)["outputs"]:
        b1 = open(os.path.join(out1, name), "rb").read()
        b2 = open(os.path.join(out2, name), "rb").read()
        assert b1 == b2, name
    m1, m2 = read_manifest(out1), read_manifest(out2)
    m1.pop("generated_at"), m2.pop("generated_at")
    assert m1 == m2


def test_seed_override_changes_data(tmp_path):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 0.5, "b": 1.5},
                        "d": 1, "L": 16, "seed": 1},
    })
    out1, out2 = str(tmp_path / "s1"), str(tmp_path / "s2")
    assert main(["gen-env", "--config", cfg, "--out", out1]) == 0
    assert main(["gen-env", "--config", cfg, "--seed", "2", "--out", out2]) == 0
    e1 = open(os.path.join(out1, "environment.json")).read()
    e2 = open(os.path.join(out2, "environment.json")).read()
    assert e1 != e2


def test_out_dir_env_var(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "constant", "params": {}, "d": 1, "L": 4, "seed": 0},
    })
    target = str(tmp_path / "from_env")
    monkeypatch.setenv("RWRE_OUT", target)
    assert main(["gen-env", "--config", cfg]) == 0
    assert os.path.exists(os.path.join(target, "environment.json"))


def test_unknown_family_gives_error_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "no_such_family", "params": {}, "d": 1, "L": 4, "seed": 0},
    })
    code = main(["gen-env", "--config", cfg, "--out", str(tmp_path / "x")])
    assert code != 0
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ParameterDomainError"


def test_structurally_broken_config_gives_error_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "cfg.json", {"environment": {"family": "constant"}})
    code = main(["gen-env", "--config", cfg, "--out", str(tmp_path / "x")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "invalid_config"


def test_domain_error_gives_error_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "cfg.json", {
        "environment": {"family": "uniform_interval", "params": {"a": 2.0, "b": 1.0},
                        "d": 1, "L": 4, "seed": 0},
    })
    code = main(["gen-env", "--config", cfg, "--out", str(tmp_path / "x")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ParameterDomainError"


def test_missing_config_file(tmp_path, capsys):
    code = main(["gen-env", "--config", str(tmp_path / "nope.json")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config_unreadable"
