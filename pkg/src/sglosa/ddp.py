"""Constrained differential dynamic programming for the stochastic problem.

The right-hand side of the Bellman equation is expanded to second order
around a nominal no-switch trajectory. Stage cost and dynamics are already
quadratic/linear; only the escape cost is approximated, by a locally
weighted quadratic fit on a small stencil around each nominal next state.
The per-stage problem in the scalar control is a box-constrained QP whose
solution is the clamped Newton step, with a feedback row that follows the
active bound.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .deterministic import pessimistic_trajectory
from .model import Scenario, Trajectory, VehicleState, expected_cost


COST_TOL = 1e-12  # relative; increases below this are rounding, not divergence


class FitError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Stencil:
    """Offsets (in units of ``hx``, ``hv``) at which the escape cost is
    sampled, with tricube weights over normalized distance."""

    hx: float = 0.5
    hv: float = 0.25
    offsets: tuple = tuple((i, j) for i in (-1, 0, 1) for j in (-1, 0, 1))
    bandwidth: float = 2.0

    def points(self) -> np.ndarray:
        return _points(self).copy()

    def weights(self) -> np.ndarray:
        d = np.hypot(*np.asarray(self.offsets, dtype=float).T) / self.bandwidth
        return np.where(d < 1.0, (1.0 - d**3) ** 3, 0.0)

    def enlarged(self) -> Stencil:
        return Stencil(2 * self.hx, 2 * self.hv, self.offsets, self.bandwidth)


@functools.lru_cache(maxsize=32)
def _points(stencil: Stencil) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(stencil.offsets, dtype=float) * (stencil.hx, stencil.hv))


def _design(d: np.ndarray) -> np.ndarray:
    dx, dv = d[:, 0], d[:, 1]
    return np.column_stack([dx * dx, dv * dv, dx * dv, dx, dv, np.ones_like(dx)])


@functools.lru_cache(maxsize=32)
def fit_operator(stencil: Stencil) -> np.ndarray:
    """6 x n matrix mapping stencil values to (p1..p6)."""
    X = _design(stencil.points())
    W = stencil.weights()
    N = X.T @ (W[:, None] * X)
    if np.linalg.matrix_rank(N, tol=1e-10 * np.abs(N).max()) < 6:
        raise FitError(f"stencil {stencil} cannot determine a quadratic")
    op = np.linalg.solve(N, X.T * W)
    op.flags.writeable = False
    return op


@dataclass(frozen=True)
class EscapeQuadFit:
    """``p(dx, dv) = p1 dx^2 + p2 dv^2 + p3 dx dv + p4 dx + p5 dv + p6``."""

    p: tuple

    @property
    def hessian(self) -> np.ndarray:
        p1, p2, p3 = self.p[:3]
        return np.array([[2 * p1, p3], [p3, 2 * p2]])

    @property
    def gradient(self) -> np.ndarray:
        return np.array(self.p[3:5])

    def __call__(self, dx, dv):
        p1, p2, p3, p4, p5, p6 = self.p
        return p1 * dx * dx + p2 * dv * dv + p3 * dx * dv + p4 * dx + p5 * dv + p6


def fit_quadratic(fun, center: VehicleState, stencil: Stencil = Stencil()) -> EscapeQuadFit:
    """Weighted least-squares quadratic of ``fun(x, v)`` (vectorized) around
    ``center``; a singular stencil is enlarged once before giving up."""
    try:
        L = fit_operator(stencil)
    except FitError:
        stencil = stencil.enlarged()
        L = fit_operator(stencil)
    d = stencil.points()
    vals = np.asarray(fun(center.x + d[:, 0], center.v + d[:, 1]), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise FitError(f"non-finite escape values around {center}")
    return EscapeQuadFit(tuple(float(c) for c in L @ vals))


def fit_quadratic_escape(nominal_next: VehicleState, scenario: Scenario,
                         stencil: Stencil = Stencil()) -> EscapeQuadFit:
    return fit_quadratic(scenario.escape, nominal_next, stencil)


def escape_fits(traj: Trajectory, scenario: Scenario, stencil: Stencil = Stencil(),
                kernels=backend) -> np.ndarray:
    """Fits (K x 6) at every nominal next state; zero rows where the switch
    probability vanishes."""
    return kernels.escape_fits(
        np.ascontiguousarray(traj.x), np.ascontiguousarray(traj.v),
        scenario.prior.switch_probabilities, _points(stencil),
        fit_operator(stencil), *scenario.escape_args)


@dataclass(frozen=True)
class DdpParams:
    eps: float = 1.0
    eps1: float = 1e-4
    max_iterations: int = 50
    stencil: Stencil = Stencil()
    max_halvings: int = 4
    # "control": use the fitted escape Hessian as is and only floor the
    # control curvature; "escape": also project the escape Hessian to PSD
    convexity: str = "control"

    def __post_init__(self):
        if self.convexity not in ("control", "escape"):
            raise ValueError("convexity must be 'control' or 'escape'")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must be in (0, 1]")
        if self.eps1 <= 0:
            raise ValueError("eps1 must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class BackwardResult:
    alpha: np.ndarray
    beta: np.ndarray
    quad: np.ndarray  # A11 A12 A22 B1 B2 C D E1 E2 per stage
    active: np.ndarray  # 0 interior, +-1 position, +-2 speed, +-3 acceleration bound
    projections: int


def backward_pass(nominal: Trajectory, scenario: Scenario, fits: np.ndarray, kernels=backend,
                  project: bool = False) -> BackwardResult:
    """Gains per stage; the value quadratic at ``k_max`` is zero."""
    p = scenario.prior.switch_probabilities
    alpha, beta, quad, active, nproj = kernels.ddp_backward(
        np.ascontiguousarray(nominal.x), np.ascontiguousarray(nominal.v),
        np.ascontiguousarray(nominal.a), p, np.ascontiguousarray(fits),
        scenario.bounds.as_tuple(), scenario.T, project)
    return BackwardResult(np.asarray(alpha), np.asarray(beta), np.asarray(quad),
                          np.asarray(active), int(nproj))


def forward_pass(nominal: Trajectory, gains: BackwardResult, eps: float, scenario: Scenario,
                 kernels=backend) -> tuple[Trajectory, int]:
    """New trajectory under ``a = a_bar + eps*(alpha + beta dx)``, controls
    clamped to the state/control bounds; cost is the exact expected cost."""
    nx, nv, na, nclamp, _, cost, _ = kernels.ddp_forward(
        nominal.x, nominal.v, nominal.a, gains.alpha, gains.beta, float(eps),
        scenario.bounds.as_tuple(), scenario.T, scenario.prior.switch_probabilities,
        *scenario.escape_args)
    return Trajectory(nx, nv, na, scenario.T, cost), int(nclamp)


@dataclass
class DdpIteration:
    iteration: int
    cost: float
    eps: float
    step_norm: float
    clamps: int
    projections: int
    feasible: bool = True


@dataclass
class DdpResult:
    trajectory: Trajectory
    log: list = field(default_factory=list)
    initial_cost: float = math.nan
    converged: bool = False
    gains: BackwardResult | None = None

    @property
    def cost(self) -> float:
        return self.trajectory.cost

    @property
    def iterations(self) -> int:
        return len(self.log)


def initial_trajectory(scenario: Scenario) -> Trajectory:
    traj = pessimistic_trajectory(scenario)
    traj.cost = expected_cost(scenario, traj.x, traj.v, traj.a)
    return traj


def solve_ddp(scenario: Scenario, params: DdpParams = DdpParams(),
              initial: Trajectory | None = None, kernels=backend) -> DdpResult:
    """Alternate backward and forward passes until the control change has
    Euclidean norm below ``eps1``.

    A forward pass that raises the cost is retried from the same gains with
    halved step scaling, up to ``max_halvings`` times; the cheapest attempt
    is accepted. A rollout that leaves the box never beats one that stays
    inside, and any feasible rollout improves on an infeasible incumbent.

    If no attempt is accepted and the rollouts were clamped at stages the
    backward pass left free, the backward pass is redone once with those
    bounds held active (the nominal sits on a weakly active state bound)
    and the attempts are repeated.
    """
    nom = initial if initial is not None else initial_trajectory(scenario)
    if not math.isfinite(nom.cost):
        nom.cost = expected_cost(scenario, nom.x, nom.v, nom.a)
    res = DdpResult(nom, initial_cost=nom.cost)
    x, v, a, cost, log, converged, gains = kernels.ddp_solve(
        np.ascontiguousarray(nom.x, dtype=float), np.ascontiguousarray(nom.v, dtype=float),
        np.ascontiguousarray(nom.a, dtype=float), float(nom.cost),
        scenario.prior.switch_probabilities, _points(params.stencil), fit_operator(params.stencil),
        scenario.bounds.as_tuple(), scenario.T, *scenario.escape_args,
        float(params.eps), float(params.eps1), int(params.max_iterations),
        int(params.max_halvings), params.convexity == "escape", COST_TOL)
    res.log = [DdpIteration(i + 1, float(r[0]), float(r[1]), float(r[2]), int(r[3]), int(r[4]),
                            bool(r[5])) for i, r in enumerate(log)]
    res.converged = bool(converged)
    res.trajectory = Trajectory(x, v, a, scenario.T, float(cost))
    res.gains = BackwardResult(*gains[:4], int(gains[4]))
    return res


def write_log_csv(result: DdpResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "cost", "eps", "step_norm", "clamps", "projections", "feasible"])
        for r in result.log:
            wr.writerow([r.iteration, f"{r.cost:.9g}", f"{r.eps:.9g}", f"{r.step_norm:.9g}",
                         r.clamps, r.projections, int(r.feasible)])
