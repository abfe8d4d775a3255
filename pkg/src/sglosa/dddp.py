"""Discrete differential dynamic programming (corridor-restricted SDP).

Each pass solves the stochastic Bellman recursion only inside a tube of
states around the incumbent no-switch trajectory; the control set is left
untouched. When a pass brings no improvement the discretization is halved,
which also halves the tube since its width scales with the discretization.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .deterministic import pessimistic_trajectory
from .model import Scenario, Trajectory, trajectory_cost
from .sdp import EscapeCache, Grid, backward_recursion, rollout

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-9


@dataclass(frozen=True)
class DddpParams:
    da0: float = 0.5
    C: tuple = (20.0, 4.0)  # (C_x, C_v)
    da_floor: float = 0.125
    max_iterations: int = 100
    # "halfwidth": |x - x_inc| <= C_x*da, |v - v_inc| <= C_v*da;
    # "width": C_x*da is the full position corridor (+-C_x*da/2)
    corridor: str = "halfwidth"

    def __post_init__(self):
        if self.da0 <= 0 or self.da_floor <= 0:
            raise ValueError("discretizations must be positive")
        if self.da0 < self.da_floor:
            raise ValueError("da0 must be >= da_floor")
        ratio = self.da0 / self.da_floor
        if abs(ratio - 2 ** round(math.log2(ratio))) > 1e-9:
            raise ValueError("da0 must be da_floor times a power of two")
        if len(self.C) != 2 or min(self.C) < 0:
            raise ValueError("C must be a non-negative pair (C_x, C_v)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.corridor not in ("width", "halfwidth"):
            raise ValueError("corridor must be 'width' or 'halfwidth'")


@dataclass
class DddpIteration:
    iteration: int
    da: float
    dx: float
    width_x: float  # full corridor widths (m, m/s)
    width_v: float
    cost: float
    improved: bool


@dataclass
class DddpResult:
    trajectory: Trajectory
    log: list = field(default_factory=list)
    initial_cost: float = math.nan
    converged: bool = True
    escape_evaluations: int = 0

    @property
    def cost(self) -> float:
        return self.trajectory.cost

    @property
    def iterations(self) -> int:
        return len(self.log)


def corridor_halfwidths(grid: Grid, C, corridor: str = "halfwidth") -> tuple[int, int]:
    """Corridor half-widths in nodes: ``C_x*da`` metres (``C_x*da/2`` with
    ``corridor="width"``) and ``C_v*da`` m/s."""
    cx, cv = C
    if corridor == "width":
        cx = cx / 2
    hx = math.floor(cx * grid.delta / grid.dx + 1e-9)
    hv = math.floor(cv * grid.delta / grid.dv + 1e-9)
    return hx, hv


def corridor_boxes(incumbent: Trajectory, grid: Grid, C, corridor: str = "halfwidth") -> list:
    hx, hv = corridor_halfwidths(grid, C, corridor)
    ix = np.rint(incumbent.x / grid.dx).astype(int)
    iv = np.rint(incumbent.v / grid.dv).astype(int)
    return [grid.box(int(i), int(j), hx, hv) for i, j in zip(ix, iv)]


def corridor_pass(incumbent: Trajectory, da: float, C, scenario: Scenario,
                  cache: EscapeCache | None = None, jobs: int = 1,
                  corridor: str = "halfwidth") -> Trajectory:
    """Corridor-optimal no-switch trajectory around ``incumbent`` at
    discretization ``da``; its ``cost`` is the corridor value at the start."""
    grid = Grid.for_scenario(scenario, da)
    if cache is None:
        cache = EscapeCache(scenario, grid)
    table = backward_recursion(scenario, grid, corridor_boxes(incumbent, grid, C, corridor), cache, jobs)
    return rollout(table, scenario, float(incumbent.x[0]), float(incumbent.v[0]))


def initial_trajectory(scenario: Scenario, da: float) -> Trajectory:
    traj = pessimistic_trajectory(scenario, delta=da)
    traj.cost = trajectory_cost(scenario, traj)
    return traj


def solve_dddp(scenario: Scenario, params: DddpParams = DddpParams(),
               cache: EscapeCache | None = None, jobs: int = 1,
               initial: Trajectory | None = None) -> DddpResult:
    """Iterate corridor passes from the pessimistic initializer.

    A pass that fails to lower the cost by more than ``IMPROVEMENT_TOL``
    keeps the incumbent and halves the discretization. The run stops at the
    first pass without improvement once halving would go below ``da_floor``.
    """
    da = params.da0
    if cache is None:
        cache = EscapeCache(scenario, Grid.for_scenario(scenario, params.da_floor))
    inc = initial if initial is not None else initial_trajectory(scenario, da)
    if not math.isfinite(inc.cost):
        inc.cost = trajectory_cost(scenario, inc)
    res = DddpResult(inc, initial_cost=inc.cost)
    n_eval0 = cache.evaluations
    for it in range(1, params.max_iterations + 1):
        cand = corridor_pass(inc, da, params.C, scenario, cache, jobs, params.corridor)
        improved = cand.cost < inc.cost - IMPROVEMENT_TOL
        if improved:
            inc = cand
        grid = Grid.for_scenario(scenario, da)
        hx, hv = corridor_halfwidths(grid, params.C, params.corridor)
        res.log.append(DddpIteration(it, da, grid.dx, 2 * hx * grid.dx, 2 * hv * grid.dv,
                                     inc.cost, improved))
        log.debug("dddp it=%d da=%g cost=%.9g improved=%s", it, da, inc.cost, improved)
        if improved:
            continue
        if da / 2 < params.da_floor - 1e-12:
            break
        da /= 2
    else:
        res.converged = False
    res.trajectory = inc
    res.escape_evaluations = cache.evaluations - n_eval0
    return res


def write_log_csv(result: DddpResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "da", "dx", "cost", "improved"])
        for r in result.log:
            wr.writerow([r.iteration, f"{r.da:.9g}", f"{r.dx:.9g}", f"{r.cost:.9g}", int(r.improved)])
