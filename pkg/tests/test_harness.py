import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from sglosa import harness
from sglosa.harness import (ConfigError, builtin_config, config_from_dict, dddp_param_sweep,
                            load_config, monte_carlo, mpc_simulate, read_trajectory_csv,
                            recompute_cost, run_scenario, solve, sweep_initial_conditions,
                            write_trajectory_csv)
from sglosa.model import SCENARIOS, SwitchingPrior, expected_cost

MINIMAL = {"scenario": {"x0": 0.0, "v0": 5.0, "xe": 220.0, "ve": 11.0, "x1": 150.0}}


def _fast(cfg):
    return replace(cfg, sdp=replace(cfg.sdp, delta=0.5))


# -- configuration --------------------------------------------------------------

def test_minimal_config_defaults():
    cfg = config_from_dict(MINIMAL)
    assert cfg.scenario.prior == SwitchingPrior.uniform(10, 30)
    assert cfg.scenario.w == 0.1 and cfg.scenario.T == 1.0
    assert cfg.sdp.delta == 0.125
    assert cfg.dddp.C == (20.0, 4.0) and cfg.dddp.da0 == 0.5


def test_missing_field_is_named():
    d = {"scenario": {k: v for k, v in MINIMAL["scenario"].items() if k != "ve"}}
    with pytest.raises(ConfigError, match=r"\bve\b"):
        config_from_dict(d)


@pytest.mark.parametrize("d, match", [
    ({"scenario": {**MINIMAL["scenario"], "speed": 3}}, "scenario.speed"),
    ({**MINIMAL, "solver": {}}, "solver"),
    ({"scenario": {**MINIMAL["scenario"], "x0": "zero"}}, "scenario.x0"),
    ({"scenario": {**MINIMAL["scenario"], "w": -1.0}}, "w > 0"),
    ({**MINIMAL, "prior": {"kind": "uniform", "k_min": 10}}, "prior.k_max"),
    ({**MINIMAL, "prior": {"kind": "poisson"}}, "prior.kind"),
    ({**MINIMAL, "sdp": {"delta": 0}}, "sdp.delta"),
    ({**MINIMAL, "dddp": {"C": [1.0]}}, "dddp.C"),
    ({**MINIMAL, "dddp": {"corridor": "diameter"}}, "dddp"),
    ({**MINIMAL, "ddp": {"convexity": "none"}}, "ddp"),
    ({**MINIMAL, "mpc": {"resolve": "yes"}}, "mpc.resolve"),
    ({**MINIMAL, "mpc": {"runs": 0}}, "mpc.runs"),
])
def test_config_errors(d, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(d)


def test_json_syntax_error_has_line_and_column(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "scenario": {\n    "x0": 0,,\n  }\n}\n')
    with pytest.raises(ConfigError, match=r"line 3, column \d+"):
        load_config(path)


def test_config_round_trips_through_dict():
    cfg = builtin_config(2)
    d = cfg.to_dict()
    again = config_from_dict(json.loads(json.dumps(d)))
    assert again.scenario == cfg.scenario
    assert again.dddp == cfg.dddp and again.ddp == cfg.ddp and again.sdp == cfg.sdp


def test_file_overrides_builtin(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"scenario": {"v0": 7.0}, "prior": {"kind": "explicit", "k_min": 4,
                                                                    "probs": [0.25, 0.75]}}))
    cfg = load_config(path, builtin_config(1))
    assert cfg.scenario.v0 == 7.0 and cfg.scenario.x0 == 0.0
    assert (cfg.scenario.prior.k_min, cfg.scenario.prior.k_max) == (4, 5)


def test_unknown_builtin():
    with pytest.raises(ConfigError):
        builtin_config(4)


def test_unknown_solver():
    with pytest.raises(ConfigError):
        solve(builtin_config(1), "lqr")


# -- reports and files ----------------------------------------------------------

@pytest.mark.parametrize("solver", ["sdp", "dddp", "ddp"])
def test_run_scenario_writes_outputs(tmp_path, solver):
    cfg = _fast(builtin_config(1))
    rep = run_scenario(cfg, solver, tmp_path)
    assert rep.wall_time > 0 and np.isfinite(rep.cost) and rep.converged
    with open(rep.trajectory_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["k", "t", "x", "v", "a"]
    assert len(rows) == 1 + 31 and rows[-1][4] == ""
    report = json.loads((tmp_path / f"scenario1_{solver}_report.json").read_text())
    assert report["cost"] == rep.cost and report["solver"] == solver
    assert report["config"]["scenario"]["x0"] == 0.0
    assert (rep.log_path is None) == (solver == "sdp")


@pytest.mark.parametrize("solver", ["sdp", "dddp"])
def test_grid_solver_round_trip_is_exact(tmp_path, solver):
    rep = run_scenario(_fast(builtin_config(3)), solver, tmp_path)
    assert rep.recomputed_cost == pytest.approx(rep.cost, rel=1e-15, abs=1e-15)


@pytest.mark.parametrize("i", [1, 2, 3])
def test_ddp_round_trip_relative(tmp_path, i):
    rep = run_scenario(builtin_config(i), "ddp", tmp_path)
    assert rep.recomputed_cost == pytest.approx(rep.cost, rel=1e-9, abs=0)


@pytest.mark.xfail(strict=True, reason="9 significant digits resolve x near 150 only to ~1e-7")
def test_ddp_round_trip_absolute(tmp_path):
    rep = run_scenario(builtin_config(3), "ddp", tmp_path)
    assert abs(rep.recomputed_cost - rep.cost) <= 1e-9


def test_csv_rounding_bound(tmp_path):
    """The recomputed cost moves by no more than the first-order effect of
    rounding every stored value to 9 significant digits."""
    sc = SCENARIOS[3]
    tr = solve(builtin_config(3), "ddp").trajectory
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, path)
    back = read_trajectory_csv(path, sc.T)
    for a, b in ((tr.x, back.x), (tr.v, back.v), (tr.a, back.a)):
        assert np.all(np.abs(a - b) <= 5e-9 * np.abs(a) + 1e-300)
    h = 1e-6
    grads = []
    for arr in ("x", "v", "a"):
        base = getattr(tr, arr)
        g = np.empty(len(base))
        for j in range(len(base)):
            up, dn = [np.array(getattr(tr, n), dtype=float) for n in "xva"], \
                [np.array(getattr(tr, n), dtype=float) for n in "xva"]
            idx = "xva".index(arr)
            up[idx][j] += h
            dn[idx][j] -= h
            g[j] = (expected_cost(sc, *up) - expected_cost(sc, *dn)) / (2 * h)
        grads.append(np.abs(g) @ (5e-9 * np.abs(base)))
    bound = sum(grads)
    assert abs(expected_cost(sc, back.x, back.v, back.a) - tr.cost) <= 1.01 * bound + 1e-15


def test_outputs_deterministic(tmp_path):
    cfg = _fast(builtin_config(2))
    for sub in ("a", "b"):
        for s in ("sdp", "dddp", "ddp"):
            run_scenario(cfg, s, tmp_path / sub)
    for f in sorted((tmp_path / "a").glob("*.csv")):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


# -- closed loop ----------------------------------------------------------------

@pytest.mark.parametrize("solver", ["sdp", "ddp"])
def test_mpc_reproducible(solver):
    cfg = _fast(builtin_config(1))
    a = mpc_simulate(cfg, solver, 11)
    b = mpc_simulate(cfg, solver, 11)
    assert a == b
    assert a.realized_cost == pytest.approx(
        0.5 * sum(u * u for u in a.controls) + SCENARIOS[1].escape_scalar(a.x[-1], a.v[-1])[0])


def test_mpc_one_draw_per_step():
    cfg = builtin_config(1)
    r = mpc_simulate(cfg, "ddp", 5)
    rng = np.random.default_rng(5)
    p = cfg.scenario.prior.switch_probabilities
    draws = rng.random(r.realized_k1)
    assert np.all(draws[:-1] >= p[:r.realized_k1 - 1]) and draws[-1] < p[r.realized_k1 - 1]


def _seed_with_k1(cfg, k1):
    p = cfg.scenario.prior.switch_probabilities
    for seed in range(10_000):
        u = np.random.default_rng(seed).random(len(p))
        if np.argmax(u < p) + 1 == k1:
            return seed
    raise AssertionError


@pytest.mark.parametrize("solver", ["sdp", "dddp", "ddp"])
def test_mpc_latest_switch_follows_rollout(solver):
    cfg = _fast(builtin_config(2))
    seed = _seed_with_k1(cfg, cfg.scenario.prior.k_max)
    plan = solve(cfg, solver)
    r = mpc_simulate(cfg, solver, seed, plan=plan)
    assert r.realized_k1 == cfg.scenario.prior.k_max
    np.testing.assert_array_equal(r.controls, plan.trajectory.a)
    np.testing.assert_allclose(r.x, plan.trajectory.x, rtol=0, atol=1e-12)


def test_mpc_degenerate_prior_realizes_planned_cost():
    sc = replace(SCENARIOS[1], prior=SwitchingPrior.from_mapping({20: 1.0}))
    cfg = replace(builtin_config(1), scenario=sc)
    plan = solve(cfg, "ddp")
    r = mpc_simulate(cfg, "ddp", 0, plan=plan)
    assert r.realized_k1 == 20
    assert r.realized_cost == pytest.approx(plan.trajectory.cost, rel=1e-12)


@pytest.mark.parametrize("solver", ["dddp", "ddp"])
def test_mpc_resolve_runs(solver):
    cfg = builtin_config(3)
    r = mpc_simulate(cfg, solver, 3, resolve=True)
    assert np.isfinite(r.realized_cost)
    assert max(r.x) <= cfg.scenario.bounds.x_max + 1e-9
    # before the switch the signal is red: the stop line is never passed
    assert all(x <= cfg.scenario.x1 + 1e-9 for x in r.x)


def test_monte_carlo_summary():
    cfg = _fast(builtin_config(1))
    summ = monte_carlo(cfg, "sdp", 200, seed=0)
    assert summ.runs == 200 == sum(summ.k1_counts.values())
    assert set(summ.k1_counts) <= set(range(10, 31))
    assert abs(summ.mean - summ.planned_cost) < 4 * summ.std_error


# -- sweeps ---------------------------------------------------------------------

def test_single_cell_sweep_equals_run_scenario(tmp_path):
    cfg = builtin_config(1)
    rows = sweep_initial_conditions(cfg, [0.0], [5.0], path=tmp_path / "s.csv")
    by = {r["solver"]: r for r in rows}
    for s in ("dddp", "ddp"):
        rep = run_scenario(cfg, s)
        assert by[s]["cost"] == rep.cost and by[s]["iterations"] == rep.iterations
        assert by[s]["error"] == ""
    with open(tmp_path / "s.csv") as fh:
        assert next(csv.reader(fh)) == ["x0", "v0", "solver", "time", "cost", "iterations", "error"]


def test_sweep_records_failing_cells():
    rows = sweep_initial_conditions(builtin_config(1), [0.0, 400.0], [5.0], jobs=2)
    bad = [r for r in rows if r["x0"] == 400.0]
    good = [r for r in rows if r["x0"] == 0.0]
    assert bad and all(r["error"] and np.isnan(r["cost"]) for r in bad)
    assert all(not r["error"] for r in good)


def test_sweep_parallel_matches_serial():
    cfg = builtin_config(2)
    a = sweep_initial_conditions(cfg, [0.0, 40.0], [8.0, 11.0], jobs=1)
    b = sweep_initial_conditions(cfg, [0.0, 40.0], [8.0, 11.0], jobs=3)
    strip = [{k: v for k, v in r.items() if k != "time"} for r in a]
    assert strip == [{k: v for k, v in r.items() if k != "time"} for r in b]


def test_dddp_param_sweep_subset(tmp_path):
    rows = dddp_param_sweep(builtin_config(1), cvs=(4, 5), da0s=(0.5,), path=tmp_path / "p.csv")
    assert [(r["C_v"], r["C_x"], r["da0"]) for r in rows] == [(4.0, 20.0, 0.5), (5.0, 25.0, 0.5)]
    assert rows[0]["cost"] == pytest.approx(1.1751151601488679, rel=1e-12)
    assert all(r["error"] == "" for r in rows)


def test_report_backend_field():
    rep = run_scenario(builtin_config(1), "ddp")
    assert rep.backend in ("compiled", "python")
    assert harness.RunReport.__dataclass_fields__["config"]
