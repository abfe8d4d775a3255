import json

import pytest

from sglosa.cli import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, main


def test_solve_builtin(tmp_path, capsys):
    assert main(["--scenario", "1", "--solver", "ddp", "--out-dir", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "cost=1.16171" in out
    assert (tmp_path / "scenario1_ddp_trajectory.csv").exists()
    assert (tmp_path / "scenario1_ddp_log.csv").exists()
    rep = json.loads((tmp_path / "scenario1_ddp_report.json").read_text())
    assert rep["iterations"] == 3


def test_sdp_flag_overrides(tmp_path):
    assert main(["--scenario", "2", "--solver", "sdp", "--delta-a", "0.5",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "scenario2_sdp_report.json").read_text())
    assert rep["config"]["sdp"]["delta"] == 0.5


def test_dddp_corridor_flags(tmp_path):
    assert main(["--scenario", "1", "--solver", "dddp", "--cv", "2", "--cx", "10",
                 "--corridor", "width", "--out-dir", str(tmp_path)]) == EXIT_OK
    cfg = json.loads((tmp_path / "scenario1_dddp_report.json").read_text())["config"]["dddp"]
    assert cfg["C"] == [10.0, 2.0] and cfg["corridor"] == "width"


def test_nonconvergence_exit_code(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"ddp": {"max_iterations": 1}}))
    code = main(["--scenario", "1", "--config", str(path), "--out-dir", str(tmp_path)])
    assert code == EXIT_NOT_CONVERGED


@pytest.mark.parametrize("argv, message", [
    (["--solver", "ddp"], "scenario"),
    (["--scenario", "1", "--delta-a", "-1"], "delta-a"),
    (["--scenario", "1", "--cv", "-2"], "cv"),
    (["--scenario", "1", "--mpc", "--runs", "0"], "runs"),
])
def test_invalid_arguments(tmp_path, capsys, argv, message):
    assert main(argv + ["--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert message in capsys.readouterr().err


def test_invalid_config_file(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"scenario": {"x0": 0, "v0": 5, "xe": 220, "x1": 150}}))
    assert main(["--config", str(path), "--out-dir", str(tmp_path)]) == EXIT_INVALID
    assert "scenario.ve" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.json")]) == EXIT_INVALID


def test_mpc_single_and_monte_carlo(tmp_path, capsys):
    args = ["--scenario", "1", "--solver", "sdp", "--delta-a", "0.5", "--mpc", "--seed", "4",
            "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_OK
    one = json.loads((tmp_path / "scenario1_sdp_mpc.json").read_text())
    assert one["seed"] == 4 and 10 <= one["realized_k1"] <= 30
    assert len(one["controls"]) == one["realized_k1"]
    assert main(args + ["--runs", "50"]) == EXIT_OK
    mc = json.loads((tmp_path / "scenario1_sdp_mpc.json").read_text())
    assert mc["runs"] == 50 and sum(mc["k1_counts"].values()) == 50


def test_mpc_resolve(tmp_path):
    assert main(["--scenario", "3", "--solver", "ddp", "--mpc", "--resolve", "--seed", "1",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "scenario3_ddp_mpc.json").read_text())["resolve"] is True


def test_initial_sweep(tmp_path):
    assert main(["--scenario", "1", "--sweep", "initial", "--x0-grid", "0,20", "--v0-grid", "5",
                 "--jobs", "2", "--out-dir", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "scenario1_sweep_initial.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 1 * 2


@pytest.mark.parametrize("argv", [["--scenario", "1", "--sweep", "initial", "--x0-grid", "a,b"],
                                  ["--scenario", "7"], ["--solver", "lqr"]])
def test_usage_errors_are_validation_failures(argv):
    assert main(argv) == EXIT_INVALID


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "--corridor" in capsys.readouterr().out
