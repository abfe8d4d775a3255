"""Experiment harness: configuration, solver dispatch, trajectory/report
files, closed-loop (MPC) simulation with a realized switching step, and the
timing/parameter sweeps.

Configuration is a JSON object with the sections ``scenario``, ``prior``,
``sdp``, ``dddp``, ``ddp`` and ``mpc``; every section is optional when a
built-in scenario is used as the base.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import backend, dddp, ddp, sdp
from .model import (Bounds, SCENARIOS, Scenario, SwitchingPrior, Trajectory, expected_cost,
                    shift_prior, validate_scenario)

log = logging.getLogger(__name__)

SOLVERS = ("sdp", "dddp", "ddp")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass(frozen=True)
class SdpConfig:
    delta: float = 0.125
    jobs: int = 1


@dataclass(frozen=True)
class MpcConfig:
    seed: int = 0
    resolve: bool = False
    runs: int = 1


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    sdp: SdpConfig = SdpConfig()
    dddp: dddp.DddpParams = dddp.DddpParams()
    ddp: ddp.DdpParams = ddp.DdpParams()
    mpc: MpcConfig = MpcConfig()

    def to_dict(self) -> dict:
        st = self.ddp.stencil
        return {
            "scenario": {k: v for k, v in self.scenario.to_dict().items() if k != "prior"},
            "prior": self.scenario.prior.to_dict(),
            "sdp": asdict(self.sdp),
            "dddp": {"da0": self.dddp.da0, "C": list(self.dddp.C), "da_floor": self.dddp.da_floor,
                     "max_iterations": self.dddp.max_iterations, "corridor": self.dddp.corridor},
            "ddp": {"eps": self.ddp.eps, "eps1": self.ddp.eps1,
                    "max_iterations": self.ddp.max_iterations,
                    "max_halvings": self.ddp.max_halvings, "convexity": self.ddp.convexity,
                    "stencil": {"hx": st.hx, "hv": st.hv, "bandwidth": st.bandwidth}},
            "mpc": asdict(self.mpc),
        }


_SCENARIO_KEYS = ("x0", "v0", "xe", "ve", "x1", "w", "T")
_REQUIRED = ("x0", "v0", "xe", "ve", "x1")


def _number(section: str, key: str, value, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{section}.{key}: must be finite")
    return int(value) if integer else float(value)


def _section(d: dict, name: str, allowed) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = sorted(set(sec) - set(allowed))
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown field")
    return sec


def _prior(sec: dict, base: SwitchingPrior | None) -> SwitchingPrior:
    if not sec:
        if base is None:
            return SwitchingPrior.uniform(10, 30)
        return base
    kind = sec.get("kind", "uniform")
    try:
        if kind == "uniform":
            for key in ("k_min", "k_max"):
                if key not in sec:
                    raise ConfigError(f"prior.{key}: missing required field")
            return SwitchingPrior.uniform(_number("prior", "k_min", sec["k_min"], True),
                                          _number("prior", "k_max", sec["k_max"], True))
        if kind == "explicit":
            for key in ("k_min", "probs"):
                if key not in sec:
                    raise ConfigError(f"prior.{key}: missing required field")
            probs = [_number("prior", "probs", p) for p in sec["probs"]]
            return SwitchingPrior.from_probabilities(_number("prior", "k_min", sec["k_min"], True),
                                                     probs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from None
    raise ConfigError(f"prior.kind: expected 'uniform' or 'explicit', got {kind!r}")


def config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    """Build and validate a configuration; values in ``d`` override ``base``."""
    if not isinstance(d, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = sorted(set(d) - {"scenario", "prior", "sdp", "dddp", "ddp", "mpc"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown section")
    sc = _section(d, "scenario", _SCENARIO_KEYS + ("bounds", "name", "escape_model"))
    if base is None:
        for key in _REQUIRED:
            if key not in sc:
                raise ConfigError(f"scenario.{key}: missing required field")
        scenario = Scenario(0.0, 0.0, 0.0, 0.0, 0.0)
    else:
        scenario = base.scenario
    vals = {k: _number("scenario", k, sc[k]) for k in _SCENARIO_KEYS if k in sc}
    if "bounds" in sc:
        bsec = _section(sc, "bounds", Bounds.__dataclass_fields__)
        b = {k: _number("scenario.bounds", k, v) for k, v in bsec.items()}
        vals["bounds"] = replace(scenario.bounds, **b)
    if "name" in sc:
        vals["name"] = str(sc["name"])
    if "escape_model" in sc:
        vals["escape_model"] = sc["escape_model"]
    vals["prior"] = _prior(_section(d, "prior", ("kind", "k_min", "k_max", "probs")),
                           scenario.prior if base is not None else None)
    try:
        scenario = replace(scenario, **vals)
    except ValueError as exc:
        raise ConfigError(f"scenario.escape_model: {exc}") from None
    bad = validate_scenario(scenario)
    if bad:
        raise ConfigError(f"scenario: violated {'; '.join(bad)}")

    prev = base or RunConfig(scenario)
    s = _section(d, "sdp", ("delta", "jobs"))
    sdp_cfg = SdpConfig(_number("sdp", "delta", s.get("delta", prev.sdp.delta)),
                        _number("sdp", "jobs", s.get("jobs", prev.sdp.jobs), True))
    if sdp_cfg.delta <= 0:
        raise ConfigError("sdp.delta: must be positive")

    s = _section(d, "dddp", ("da0", "C", "da_floor", "max_iterations", "corridor"))
    C = s.get("C", list(prev.dddp.C))
    if not isinstance(C, (list, tuple)) or len(C) != 2:
        raise ConfigError("dddp.C: expected [C_x, C_v]")
    try:
        dddp_cfg = dddp.DddpParams(
            _number("dddp", "da0", s.get("da0", prev.dddp.da0)),
            tuple(_number("dddp", "C", c) for c in C),
            _number("dddp", "da_floor", s.get("da_floor", prev.dddp.da_floor)),
            _number("dddp", "max_iterations", s.get("max_iterations", prev.dddp.max_iterations), True),
            s.get("corridor", prev.dddp.corridor))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"dddp: {exc}") from None

    s = _section(d, "ddp", ("eps", "eps1", "max_iterations", "max_halvings", "convexity", "stencil"))
    st = prev.ddp.stencil
    if "stencil" in s:
        ss = _section(s, "stencil", ("hx", "hv", "bandwidth"))
        st = ddp.Stencil(_number("ddp.stencil", "hx", ss.get("hx", st.hx)),
                         _number("ddp.stencil", "hv", ss.get("hv", st.hv)),
                         st.offsets,
                         _number("ddp.stencil", "bandwidth", ss.get("bandwidth", st.bandwidth)))
    try:
        ddp_cfg = ddp.DdpParams(
            _number("ddp", "eps", s.get("eps", prev.ddp.eps)),
            _number("ddp", "eps1", s.get("eps1", prev.ddp.eps1)),
            _number("ddp", "max_iterations", s.get("max_iterations", prev.ddp.max_iterations), True),
            st,
            _number("ddp", "max_halvings", s.get("max_halvings", prev.ddp.max_halvings), True),
            s.get("convexity", prev.ddp.convexity))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"ddp: {exc}") from None

    s = _section(d, "mpc", ("seed", "resolve", "runs"))
    resolve = s.get("resolve", prev.mpc.resolve)
    if not isinstance(resolve, bool):
        raise ConfigError("mpc.resolve: expected true or false")
    mpc_cfg = MpcConfig(_number("mpc", "seed", s.get("seed", prev.mpc.seed), True), resolve,
                        _number("mpc", "runs", s.get("runs", prev.mpc.runs), True))
    if mpc_cfg.runs < 1:
        raise ConfigError("mpc.runs: must be >= 1")
    return RunConfig(scenario, sdp_cfg, dddp_cfg, ddp_cfg, mpc_cfg)


def builtin_config(scenario_id: int) -> RunConfig:
    if scenario_id not in SCENARIOS:
        raise ConfigError(f"scenario: unknown built-in scenario {scenario_id!r} (1, 2 or 3)")
    return RunConfig(SCENARIOS[scenario_id])


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    text = Path(path).read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(d, base)


# ---------------------------------------------------------------------------
# solving and files


@dataclass
class SolveOutcome:
    trajectory: Trajectory
    iterations: int
    converged: bool
    wall_time: float
    result: object = None  # solver-specific result (table / DddpResult / DdpResult)


def solve(cfg: RunConfig, solver: str, scenario: Scenario | None = None,
          initial: Trajectory | None = None) -> SolveOutcome:
    """Run one solver; the wall time covers the solve call only."""
    sc = scenario or cfg.scenario
    if solver == "sdp":
        t0 = time.perf_counter()
        table = sdp.solve_sdp(sc, cfg.sdp.delta, jobs=cfg.sdp.jobs)
        wall = time.perf_counter() - t0
        traj = sdp.rollout(table, sc)
        return SolveOutcome(traj, 1, True, wall, table)
    if solver == "dddp":
        t0 = time.perf_counter()
        res = dddp.solve_dddp(sc, cfg.dddp, initial=initial)
        wall = time.perf_counter() - t0
        return SolveOutcome(res.trajectory, res.iterations, res.converged, wall, res)
    if solver == "ddp":
        t0 = time.perf_counter()
        res = ddp.solve_ddp(sc, cfg.ddp, initial=initial)
        wall = time.perf_counter() - t0
        return SolveOutcome(res.trajectory, res.iterations, res.converged, wall, res)
    raise ConfigError(f"solver: expected one of {SOLVERS}, got {solver!r}")


def write_trajectory_csv(traj: Trajectory, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "t", "x", "v", "a"])
        for k in range(traj.K + 1):
            a = f"{traj.a[k]:.9g}" if k < traj.K else ""
            wr.writerow([k, f"{k * traj.T:.9g}", f"{traj.x[k]:.9g}", f"{traj.v[k]:.9g}", a])


def read_trajectory_csv(path, T: float) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["x"]) for r in rows])
    v = np.array([float(r["v"]) for r in rows])
    a = np.array([float(r["a"]) for r in rows if r["a"] != ""])
    return Trajectory(x, v, a, T)


def recompute_cost(scenario: Scenario, path) -> float:
    """Expected cost of the trajectory stored in a CSV file."""
    t = read_trajectory_csv(path, scenario.T)
    return expected_cost(scenario, t.x, t.v, t.a)


@dataclass
class RunReport:
    scenario: str
    solver: str
    cost: float
    iterations: int
    wall_time: float
    converged: bool
    trajectory_path: str | None = None
    log_path: str | None = None
    recomputed_cost: float | None = None
    backend: str = backend.BACKEND
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def run_scenario(cfg: RunConfig, solver: str, out_dir=None) -> RunReport:
    """Solve, and with ``out_dir`` write ``<name>_<solver>_trajectory.csv``,
    the iteration log and ``<name>_<solver>_report.json``."""
    out = solve(cfg, solver)
    name = cfg.scenario.name or "scenario"
    rep = RunReport(name, solver, float(out.trajectory.cost), out.iterations, out.wall_time,
                    out.converged, config=cfg.to_dict())
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        tpath = d / f"{name}_{solver}_trajectory.csv"
        write_trajectory_csv(out.trajectory, tpath)
        rep.trajectory_path = str(tpath)
        rep.recomputed_cost = recompute_cost(cfg.scenario, tpath)
        if solver in ("dddp", "ddp"):
            lpath = d / f"{name}_{solver}_log.csv"
            (dddp if solver == "dddp" else ddp).write_log_csv(out.result, lpath)
            rep.log_path = str(lpath)
        (d / f"{name}_{solver}_report.json").write_text(rep.to_json())
    return rep


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class MpcRun:
    seed: int
    realized_k1: int
    controls: list
    x: list
    v: list
    pre_switch_cost: float
    tail_cost: float

    @property
    def realized_cost(self) -> float:
        return self.pre_switch_cost + self.tail_cost


def _shifted(traj: Trajectory) -> Trajectory:
    return Trajectory(traj.x[1:].copy(), traj.v[1:].copy(), traj.a[1:].copy(), traj.T)


def mpc_simulate(cfg: RunConfig, solver: str, seed: int, resolve: bool = False,
                 plan: SolveOutcome | None = None) -> MpcRun:
    """Closed-loop run with a realized switching step.

    One uniform draw per step decides, against p(0|k), whether the light
    turns green at k+1. Before that the solver's controls are applied
    (SDP: policy lookup at the current node; DDDP/DDP: the planned no-switch
    controls, re-planned every step with ``resolve``). Once green the
    deterministic cost-to-go from the reached state is charged.
    ``plan`` reuses an initial solution across runs.
    """
    sc = cfg.scenario
    rng = np.random.default_rng(seed)
    p = sc.prior.switch_probabilities
    plan = plan or solve(cfg, solver)
    traj = plan.trajectory
    x, v = float(sc.x0), float(sc.v0)
    xs, vs, acc = [x], [v], []
    energy = 0.0
    for k in range(sc.prior.k_max):
        if solver == "sdp":
            table = plan.result
            ix, iv, _ = table.grid.snap(x, v)
            m = table.control_index(k, ix, iv)
            if m == sdp.INFEASIBLE:
                raise RuntimeError(f"policy undefined at step {k} for state ({x:.6g}, {v:.6g})")
            a = m * table.grid.delta
        else:
            if resolve and k > 0:
                sub = replace(sc, x0=x, v0=v, prior=shift_prior(sc.prior, k))
                warm = _shifted(traj)
                if solver == "dddp":
                    # the current state lies on the finest grid only
                    sub_cfg = replace(cfg, dddp=replace(cfg.dddp, da0=cfg.dddp.da_floor))
                    traj = solve(sub_cfg, solver, sub).trajectory
                else:
                    traj = solve(cfg, solver, sub, initial=warm).trajectory
                a = float(traj.a[0])
            else:
                a = float(traj.a[k])
        x, v = x + v * sc.T + 0.5 * a * sc.T ** 2, v + a * sc.T
        energy += 0.5 * a * a
        acc.append(a)
        xs.append(x)
        vs.append(v)
        if rng.random() < p[k]:
            tail = float(sc.escape_scalar(x, v)[0])
            return MpcRun(seed, k + 1, acc, xs, vs, energy, tail)
    raise AssertionError("p(0|k_max-1) = 1 guarantees a switch")


@dataclass
class MonteCarloSummary:
    runs: int
    mean: float
    std_error: float
    planned_cost: float
    k1_counts: dict


def monte_carlo(cfg: RunConfig, solver: str, runs: int, seed: int = 0) -> MonteCarloSummary:
    """Realized costs over seeds ``seed .. seed+runs-1`` with one shared plan."""
    plan = solve(cfg, solver)
    costs = np.empty(runs)
    counts: dict = {}
    for i in range(runs):
        r = mpc_simulate(cfg, solver, seed + i, plan=plan)
        costs[i] = r.realized_cost
        counts[r.realized_k1] = counts.get(r.realized_k1, 0) + 1
    se = float(costs.std(ddof=1) / math.sqrt(runs)) if runs > 1 else math.nan
    return MonteCarloSummary(runs, float(costs.mean()), se, float(plan.trajectory.cost), counts)


# ---------------------------------------------------------------------------
# sweeps


def _run_cells(cells, fn, jobs: int):
    if jobs <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, cells))


def sweep_initial_conditions(cfg: RunConfig, x0s, v0s, jobs: int = 1, path=None,
                             solvers=("dddp", "ddp")) -> list[dict]:
    """Time DDDP and DDP from every (x0, v0); failures are recorded per cell."""
    cells = [(float(x0), float(v0), s) for x0 in x0s for v0 in v0s for s in solvers]

    def cell(c):
        x0, v0, s = c
        row = {"x0": x0, "v0": v0, "solver": s, "time": math.nan, "cost": math.nan,
               "iterations": 0, "error": ""}
        try:
            sc = cfg.scenario.with_initial(x0, v0)
            bad = validate_scenario(sc)
            if bad:
                raise ValueError("; ".join(bad))
            out = solve(cfg, s, sc)
            row.update(time=out.wall_time, cost=float(out.trajectory.cost),
                       iterations=out.iterations)
        except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the sweep
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    rows = _run_cells(cells, cell, jobs)
    if path is not None:
        _write_rows(rows, path, ["x0", "v0", "solver", "time", "cost", "iterations", "error"])
    return rows


def dddp_param_sweep(cfg: RunConfig, cvs=(2, 3, 4, 5, 6), da0s=(1.0, 0.5, 0.25, 0.125),
                     jobs: int = 1, path=None) -> list[dict]:
    """DDDP iterations, time and cost per (C_v, da0) with C_x = 5 C_v."""
    cells = [(float(cv), float(da0)) for da0 in da0s for cv in cvs]

    def cell(c):
        cv, da0 = c
        row = {"C_v": cv, "C_x": 5 * cv, "da0": da0, "iterations": 0, "time": math.nan,
               "cost": math.nan, "error": ""}
        try:
            params = replace(cfg.dddp, da0=da0, C=(5 * cv, cv))
            t0 = time.perf_counter()
            res = dddp.solve_dddp(cfg.scenario, params)
            row.update(time=time.perf_counter() - t0, cost=res.cost, iterations=res.iterations)
        except Exception as exc:  # noqa: BLE001
            row["error"] = f"{type(exc).__name__}: {exc}"
        return row

    rows = _run_cells(cells, cell, jobs)
    if path is not None:
        _write_rows(rows, path, ["C_v", "C_x", "da0", "iterations", "time", "cost", "error"])
    return rows


def _write_rows(rows, path, cols) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=cols)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in cols})
