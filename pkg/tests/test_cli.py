"""Subcommand behavior: config resolution, outputs, exit codes, determinism."""

import subprocess
import sys

import numpy as np
import pytest

from nnocp import qmri
from nnocp.cli import main


def run(tmp_path, command, config=None, seed=0, extra=()):
    argv = [command, "--out", str(tmp_path / "out"), "--seed", str(seed)]
    if config is not None:
        cfg = tmp_path / "run.cfg"
        cfg.write_text("".join(f"{k}={v}\n" for k, v in config.items()))
        argv += ["--config", str(cfg)]
    argv += list(extra)
    return main(argv), tmp_path / "out"


def test_gen_data_reaction_coarse(tmp_path, capsys):
    code, out = run(tmp_path, "gen-data", {"problem": "reaction", "size": "coarse"})
    assert code == 0
    table = np.loadtxt(out / "samples.csv", delimiter=",")
    assert table.shape == (726, 4)
    echoed = capsys.readouterr().out
    assert "resolved configuration:" in echoed
    assert "problem = reaction" in echoed


def test_gen_data_qmri_round_trip_and_determinism(tmp_path):
    cfg = {"problem": "qmri", "n": 16, "sigma": 3.0}
    code, out = run(tmp_path, "gen-data", cfg, seed=5)
    assert code == 0
    truth = qmri.load_phantom(out / "phantom.csv")
    assert truth.shape == (16, 16)
    mask = qmri.load_mask(out / "mask.csv", frames=20)
    data = qmri.load_kspace(out / "kspace.bin")
    assert data.num_frames == 20
    np.testing.assert_array_equal(data.mask, mask)

    again = tmp_path / "again"
    again.mkdir()
    code2, out2 = run(again, "gen-data", cfg, seed=5)
    assert code2 == 0
    for name in ("phantom.csv", "mask.csv", "kspace.bin"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()

    other = tmp_path / "other"
    other.mkdir()
    run(other, "gen-data", cfg, seed=6)
    assert (out / "kspace.bin").read_bytes() != (other / "out" / "kspace.bin").read_bytes()


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, "gen-data", {"problem": "reaction", "junk": 1})
    assert code == 2
    assert "unknown config key" in capsys.readouterr().err


def test_malformed_config_value_is_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, "gen-data", {"problem": "qmri", "sigma": "loud"})
    assert code == 2
    err = capsys.readouterr().err
    assert "configuration error" in err


def test_missing_config_file_is_rejected(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--config",
                 str(tmp_path / "nope.cfg")])
    assert code == 2


def test_solve_pde_writes_fields_deterministically(tmp_path):
    cfg = {"h": 2.0 ** -4}
    code, out = run(tmp_path, "solve-pde", cfg)
    assert code == 0
    state = np.loadtxt(out / "state.csv", delimiter=",")
    assert state.shape == (33, 33)
    again = tmp_path / "b"
    again.mkdir()
    code2, out2 = run(again, "solve-pde", cfg)
    assert code2 == 0
    assert (out / "state.csv").read_bytes() == (out2 / "state.csv").read_bytes()
    assert (out / "control.csv").exists()


def test_solve_pde_reports_nonconvergence(tmp_path, capsys):
    code, _ = run(tmp_path, "solve-pde", {"h": 2.0 ** -4, "max_iter": 1})
    assert code == 3


def test_solve_ocp_benchmark_smoke(tmp_path, capsys):
    # The merit comparison bottoms out near 1e-16 relative, so the smoke run
    # asks for a tolerance the line search can still certify.
    cfg = {"h": 2.0 ** -3, "alpha": 1e-2, "max_outer": 25, "tol": 1e-8}
    code, out = run(tmp_path, "solve-ocp", cfg)
    assert code == 0
    assert "status=converged" in capsys.readouterr().out
    with open(out / "history.csv") as fh:
        header = fh.readline().strip()
    assert header == "iteration,merit,residual,step_length,active_set_size"
    control = np.loadtxt(out / "control.csv", delimiter=",")
    assert control.shape == (17, 17)


def test_solve_qmri_smoke(tmp_path, capsys):
    cfg = {"n": 16, "dict": "small", "max_outer": 2, "sigma": 10.0}
    code, out = run(tmp_path, "solve-qmri", cfg)
    assert code == 0
    printed = capsys.readouterr().out
    assert "errors:" in printed
    for name in ("t1.csv", "t2.csv", "rho.csv", "history.csv"):
        assert (out / name).exists()
    t1 = np.loadtxt(out / "t1.csv", delimiter=",")
    assert t1.shape == (16, 16)
    lo, up = qmri.box_bounds()
    assert t1.min() >= lo[0] and t1.max() <= up[0]


def test_verify_errors_smoke(tmp_path, capsys):
    code, out = run(tmp_path, "verify-errors", {"dim": 8})
    assert code == 0
    printed = capsys.readouterr().out
    assert "bound_everywhere=True" in printed
    report = (out / "error_report.csv").read_text().splitlines()
    assert report[0] == "eps_n,eta_n,control_error,bound_value,status"
    assert all(line.endswith("pass") for line in report[1:])


def test_train_reaction_small_net(tmp_path, capsys):
    cfg = {"size": "coarse", "hidden": "4", "max_iter": 40}
    code, out = run(tmp_path, "train", cfg)
    assert code == 0
    assert "training finished" in capsys.readouterr().out
    assert (out / "network.txt").exists()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nnocp.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train", "solve-pde", "solve-ocp",
                 "solve-qmri", "verify-errors"):
        assert name in proc.stdout
