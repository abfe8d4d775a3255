"""Full-grid stochastic dynamic programming.

The grid is absolute: positions are multiples of ``dx = delta*T^2/2``,
speeds multiples of ``dv = delta*T`` and accelerations multiples of
``delta``. With this spacing the kinematics map nodes to nodes, so the
Bellman recursion never interpolates. The same box-restricted recursion
serves the corridor passes of DDDP.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .model import Scenario, Trajectory

log = logging.getLogger(__name__)

INFEASIBLE = backend.NO_CONTROL


@dataclass(frozen=True)
class Grid:
    delta: float
    T: float
    ix_lo: int
    ix_hi: int
    iv_lo: int
    iv_hi: int
    ia_lo: int
    ia_hi: int

    @classmethod
    def for_scenario(cls, scenario: Scenario, delta: float) -> Grid:
        if delta <= 0:
            raise ValueError("delta must be positive")
        b, T = scenario.bounds, scenario.T
        dx, dv = 0.5 * delta * T * T, delta * T
        eps = 1e-9
        return cls(
            delta, T,
            math.ceil(b.x_min / dx - eps), math.floor(b.x_max / dx + eps),
            math.ceil(b.v_min / dv - eps), math.floor(b.v_max / dv + eps),
            math.ceil(b.a_min / delta - eps), math.floor(b.a_max / delta + eps),
        )

    @property
    def dx(self) -> float:
        return 0.5 * self.delta * self.T * self.T

    @property
    def dv(self) -> float:
        return self.delta * self.T

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ix_hi - self.ix_lo + 1, self.iv_hi - self.iv_lo + 1)

    def snap(self, x: float, v: float) -> tuple[int, int, float]:
        """Nearest node (absolute indices) and the snapping distance."""
        ix = min(max(round(x / self.dx), self.ix_lo), self.ix_hi)
        iv = min(max(round(v / self.dv), self.iv_lo), self.iv_hi)
        return ix, iv, math.hypot(ix * self.dx - x, iv * self.dv - v)

    def box(self, ix_c: int, iv_c: int, hx: int, hv: int) -> tuple[int, int, int, int]:
        """Box of half-widths (hx, hv) nodes around a centre, cut to the grid.

        The centre is first clamped into the grid so the box is never empty.
        """
        ix_c = min(max(ix_c, self.ix_lo), self.ix_hi)
        iv_c = min(max(iv_c, self.iv_lo), self.iv_hi)
        ox, ov = max(ix_c - hx, self.ix_lo), max(iv_c - hv, self.iv_lo)
        return ox, ov, min(ix_c + hx, self.ix_hi) - ox + 1, min(iv_c + hv, self.iv_hi) - ov + 1

    @property
    def full_box(self) -> tuple[int, int, int, int]:
        nx, nv = self.shape
        return self.ix_lo, self.iv_lo, nx, nv


class EscapeCache:
    """Escape costs memoized per node of a reference grid.

    Coarser grids whose spacing is an integer multiple of the reference
    spacing share the same entries.
    """

    def __init__(self, scenario: Scenario, ref: Grid):
        self.scenario = scenario
        self.ref = ref
        self.table = np.full(ref.shape, np.nan)
        self.evaluations = 0

    def lookup(self, grid: Grid, box: tuple[int, int, int, int]) -> np.ndarray:
        r = grid.delta / self.ref.delta
        ri = round(r)
        if abs(r - ri) > 1e-9 or ri < 1:
            raise ValueError(f"grid spacing {grid.delta} is not a multiple of {self.ref.delta}")
        ox, ov, nx, nv = box
        i0 = ox * ri - self.ref.ix_lo
        j0 = ov * ri - self.ref.iv_lo
        view = self.table[i0:i0 + (nx - 1) * ri + 1:ri, j0:j0 + (nv - 1) * ri + 1:ri]
        missing = np.isnan(view)
        if missing.any():
            mi, mv = np.nonzero(missing)
            xs = (ox + mi) * grid.dx
            vs = (ov + mv) * grid.dv
            view[mi, mv] = self.scenario.escape(xs, vs)
            self.evaluations += len(mi)
        return np.ascontiguousarray(view)

    def fill(self) -> None:
        self.lookup(self.ref, self.ref.full_box)


@dataclass
class BoxTable:
    """Values and policies on per-stage boxes; ``policy`` holds control
    indices (``INFEASIBLE`` where no admissible control exists)."""

    grid: Grid
    boxes: list
    values: list
    policy: list
    timings: dict = field(default_factory=dict)

    def value(self, k: int, ix: int, iv: int) -> float:
        ox, ov, nx, nv = self.boxes[k]
        i, j = ix - ox, iv - ov
        if not (0 <= i < nx and 0 <= j < nv):
            return math.inf
        return float(self.values[k][i, j])

    def control_index(self, k: int, ix: int, iv: int) -> int:
        ox, ov, nx, nv = self.boxes[k]
        i, j = ix - ox, iv - ov
        if not (0 <= i < nx and 0 <= j < nv):
            return INFEASIBLE
        return int(self.policy[k][i, j])


# The full-grid table is a BoxTable whose boxes all cover the whole grid.
ValuePolicyTable = BoxTable


def _sweep(v_next, j_next, box_next, box, grid, p, jobs, kernels):
    ox, ov, nx, nv = box
    v_out = np.empty((nx, nv))
    r_out = np.empty((nx, nv), dtype=np.int16)
    args = (box_next[0], box_next[1])
    if jobs <= 1 or nx < 2 * jobs:
        kernels.stage_sweep(v_next, j_next, *args, ox, ov, v_out, r_out,
                            grid.ia_lo, grid.ia_hi, p, grid.delta)
        return v_out, r_out
    # rows are independent within a stage; the compiled kernel releases the GIL
    edges = np.linspace(0, nx, jobs + 1).astype(int)

    def run(i0, i1):
        kernels.stage_sweep(v_next, j_next, *args, ox + i0, ov, v_out[i0:i1], r_out[i0:i1],
                            grid.ia_lo, grid.ia_hi, p, grid.delta)

    with ThreadPoolExecutor(jobs) as pool:
        list(pool.map(run, edges[:-1], edges[1:]))
    return v_out, r_out


def backward_recursion(scenario: Scenario, grid: Grid, boxes: list, cache: EscapeCache,
                       jobs: int = 1, kernels=backend) -> BoxTable:
    """Bellman recursion from k_max-1 down to 0 over the given per-stage boxes.

    Transitions leaving the next stage's box are infeasible. The value at
    ``k_max`` is zero on its box.
    """
    p = scenario.prior.switch_probabilities
    K = len(p)
    if len(boxes) != K + 1:
        raise ValueError("need one box per stage 0..K")
    values = [None] * (K + 1)
    policy = [None] * K
    values[K] = np.zeros(boxes[K][2:])
    t_esc = 0.0
    t0 = time.perf_counter()
    for k in range(K - 1, -1, -1):
        pk = float(p[k])
        if pk > 0.0:
            t1 = time.perf_counter()
            j_next = cache.lookup(grid, boxes[k + 1])
            t_esc += time.perf_counter() - t1
        else:
            j_next = values[k + 1]  # unused by the sweep when p = 0
        values[k], policy[k] = _sweep(values[k + 1], j_next, boxes[k + 1], boxes[k],
                                      grid, pk, jobs, kernels)
    total = time.perf_counter() - t0
    return BoxTable(grid, list(boxes), values, policy,
                    {"escape": t_esc, "recursion": total - t_esc})


def solve_sdp(scenario: Scenario, delta: float, jobs: int = 1, cache: EscapeCache | None = None,
              kernels=backend) -> BoxTable:
    """Globally optimal value table and closed-loop policy on the full grid."""
    grid = Grid.for_scenario(scenario, delta)
    _, _, snap = grid.snap(scenario.x0, scenario.v0)
    if snap > 1e-9:
        log.warning("initial state (%g, %g) is off-grid; snapped by %.3g", scenario.x0, scenario.v0, snap)
    if cache is None:
        cache = EscapeCache(scenario, grid)
    t0 = time.perf_counter()
    cache.fill()
    warm = time.perf_counter() - t0
    K = scenario.prior.k_max
    table = backward_recursion(scenario, grid, [grid.full_box] * (K + 1), cache, jobs, kernels)
    table.timings["escape"] += warm
    table.timings["snap"] = snap
    return table


def rollout(table: BoxTable, scenario: Scenario, x0: float | None = None, v0: float | None = None) -> Trajectory:
    """No-switch trajectory obtained by following the policy from the initial node."""
    grid = table.grid
    ix, iv, _ = grid.snap(scenario.x0 if x0 is None else x0, scenario.v0 if v0 is None else v0)
    K = len(table.policy)
    cost = table.value(0, ix, iv)
    xs, vs, acc = [ix * grid.dx], [iv * grid.dv], []
    for k in range(K):
        m = table.control_index(k, ix, iv)
        if m == INFEASIBLE:
            raise RuntimeError(f"policy undefined at stage {k}, node ({ix}, {iv})")
        ix, iv = ix + 2 * iv + m, iv + m
        acc.append(m * grid.delta)
        xs.append(ix * grid.dx)
        vs.append(iv * grid.dv)
    return Trajectory(np.array(xs), np.array(vs), np.array(acc), grid.T, cost)


def extract_trajectory(table: BoxTable, scenario: Scenario) -> Trajectory:
    return rollout(table, scenario)


def argmin_tiebreak(values: dict) -> float:
    """Key (acceleration) of the smallest value; ties within 1e-12 go to the
    smallest magnitude, and to the positive one at equal magnitude."""
    finite = {a: c for a, c in values.items() if math.isfinite(c)}
    if not finite:
        raise ValueError("no finite candidate")
    best_a, best_c = None, math.inf
    for a in sorted(finite, key=lambda a: (abs(a), a < 0)):
        if finite[a] < best_c - 1e-12:
            best_a, best_c = a, finite[a]
    return best_a


def write_slice_csv(table: BoxTable, k: int, path) -> None:
    """Debug dump of one stage: k, x, v, V, a* per node."""
    grid = table.grid
    ox, ov, nx, nv = table.boxes[k]
    with open(path, "w") as fh:
        fh.write("k,x,v,V,a\n")
        for i in range(nx):
            for j in range(nv):
                m = int(table.policy[k][i, j]) if k < len(table.policy) else 0
                a = "" if m == INFEASIBLE else f"{m * grid.delta:.9g}"
                fh.write(f"{k},{(ox + i) * grid.dx:.9g},{(ov + j) * grid.dv:.9g},"
                         f"{table.values[k][i, j]:.9g},{a}\n")
