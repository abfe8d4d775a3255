"""Closed-form deterministic GLOSA.

Minimizing ``w*te + 1/2 * int a^2 dt`` for the double integrator gives a
linear acceleration ``a(t) = c1 + c2*t`` (cubic position). For a fixed
horizon the energy has the closed form

    E = 6 (D - m te)^2 / te^3 + dv^2 / (2 te),   D = xe-x0, m = (v0+ve)/2, dv = ve-v0

and the optimal free horizon is a positive root of the quartic
``w te^4 - (6 m^2 + dv^2/2) te^2 + 24 D m te - 18 D^2 = 0`` (see the
``backend`` escape kernels). Velocity and acceleration bounds are not imposed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .model import Bounds, Scenario, Trajectory, VehicleState


class BracketExhausted(RuntimeError):
    pass


class InvalidScenario(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """One cubic piece: ``a(t) = c1 + c2*(t - t0)`` on ``[t0, t0 + duration]``."""

    t0: float
    duration: float
    x_start: float
    v_start: float
    c1: float
    c2: float

    def state(self, t):
        s = np.asarray(t, dtype=float) - self.t0
        x = self.x_start + self.v_start * s + self.c1 * s**2 / 2 + self.c2 * s**3 / 6
        v = self.v_start + self.c1 * s + self.c2 * s**2 / 2
        a = self.c1 + self.c2 * s
        return x, v, a

    def max_position(self, s_end: float) -> float:
        """Largest position on ``[t0, t0 + s_end]``."""
        cands = [0.0, s_end]
        # interior stationary points: v(s) = v_start + c1 s + c2 s^2/2 = 0
        a2, a1, a0 = 0.5 * self.c2, self.c1, self.v_start
        if a2 != 0.0:
            disc = a1 * a1 - 4.0 * a2 * a0
            if disc >= 0.0:
                r = math.sqrt(disc)
                cands += [(-a1 - r) / (2 * a2), (-a1 + r) / (2 * a2)]
        elif a1 != 0.0:
            cands.append(-a0 / a1)
        best = -math.inf
        for c in cands:
            if 0.0 <= c <= s_end:
                best = max(best, self.x_start + c * (self.v_start + c * (self.c1 / 2 + c * self.c2 / 6)))
        return best

    @property
    def end(self) -> VehicleState:
        x, v, _ = self.state(self.t0 + self.duration)
        return VehicleState(float(x), float(v))

    @property
    def energy(self) -> float:
        te, c1, c2 = self.duration, self.c1, self.c2
        return 0.5 * (c1 * c1 * te + c1 * c2 * te**2 + c2 * c2 * te**3 / 3)


@dataclass(frozen=True)
class DeterministicSolution:
    te: float
    cost: float
    segments: tuple
    t_S: float | None = None
    overshoot: bool = False  # segment 1 passes x1 before t1 (non-monotone cubic)
    w: float = field(default=0.0, repr=False)

    def state(self, t):
        """Position, speed, acceleration at times ``t`` (clamped to [0, te])."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.te)
        x = np.empty_like(t)
        v = np.empty_like(t)
        a = np.empty_like(t)
        for i, seg in enumerate(self.segments):
            last = i == len(self.segments) - 1
            mask = (t >= seg.t0) & ((t <= seg.t0 + seg.duration) if last else (t < seg.t0 + seg.duration))
            x[mask], v[mask], a[mask] = seg.state(t[mask])
        return x, v, a


def cubic_coefficients(x0: float, v0: float, xe: float, ve: float, te: float) -> tuple[float, float]:
    """(c1, c2) of the minimum-energy acceleration ``c1 + c2*t``."""
    if te <= 0:
        raise ValueError("te must be positive")
    D = xe - x0 - v0 * te
    dv = ve - v0
    c2 = (6.0 * dv * te - 12.0 * D) / te**3
    c1 = dv / te - c2 * te / 2
    return c1, c2


def min_energy_cost(x0: float, v0: float, xe: float, ve: float, te: float) -> float:
    """Half the integral of squared acceleration for the fixed-horizon optimum."""
    if te <= 0:
        raise ValueError("te must be positive")
    s = xe - x0 - 0.5 * (v0 + ve) * te
    return 6.0 * s * s / te**3 + (ve - v0) ** 2 / (2.0 * te)


def unconstrained_glosa(state: VehicleState, target: tuple[float, float], w: float) -> DeterministicSolution:
    if w <= 0:
        raise ValueError("w must be positive")
    xe, ve = target
    cost, te = backend.escape_scalar(float(state.x), float(state.v), xe, ve, w)
    if not math.isfinite(cost):
        raise BracketExhausted(f"no finite free-horizon minimizer from {state}")
    if te == 0.0:
        return DeterministicSolution(0.0, 0.0, (), w=w)
    c1, c2 = cubic_coefficients(state.x, state.v, xe, ve, te)
    seg = Segment(0.0, te, float(state.x), float(state.v), c1, c2)
    return DeterministicSolution(te, cost, (seg,), w=w)


def free_glosa(scenario: Scenario, state: VehicleState) -> DeterministicSolution:
    """Post-switch deterministic solution under the scenario's escape model;
    ``cost`` is the escape cost as charged by the stochastic criterion."""
    cost, te = scenario.escape_scalar(state.x, state.v)
    if not math.isfinite(cost):
        raise BracketExhausted(f"no finite free-horizon minimizer from {state}")
    if te == 0.0:
        return DeterministicSolution(0.0, 0.0, (), w=scenario.w)
    c1, c2 = cubic_coefficients(state.x, state.v, scenario.xe, scenario.ve, te)
    seg = Segment(0.0, te, float(state.x), float(state.v), c1, c2)
    return DeterministicSolution(te, cost, (seg,), w=scenario.w)


def escape_cost(state: VehicleState, k1: int, scenario: Scenario) -> float:
    """Deterministic cost-to-go once the light has switched at step ``k1``.

    Time already spent is never charged, so the value does not depend on
    ``k1``.
    """
    if state.x > scenario.x1:
        raise ValueError("vehicle past the signal before the switch")
    return free_glosa(scenario, state).cost


def crossing_time(sol: DeterministicSolution, x1: float) -> float | None:
    """First time the position reaches ``x1``; None if it never does."""
    for seg in sol.segments:
        # x(s) - x1 = x_start - x1 + v s + c1 s^2/2 + c2 s^3/6
        coeffs = [seg.c2 / 6, seg.c1 / 2, seg.v_start, seg.x_start - x1]
        roots = np.roots(coeffs) if any(abs(c) > 0 for c in coeffs[:3]) else []
        real = sorted(r.real for r in np.atleast_1d(roots)
                      if abs(r.imag) < 1e-9 and -1e-9 <= r.real <= seg.duration + 1e-9)
        if abs(seg.x_start - x1) <= 1e-12:
            return seg.t0
        if real:
            return seg.t0 + max(real[0], 0.0)
    return None


def two_segment_cost(vS, scenario: Scenario, x0: float, v0: float, t1: float):
    """Cost of crossing ``x1`` at ``t1`` with speed ``vS`` (vectorized),
    excluding any elapsed-time charge."""
    vS = np.asarray(vS, dtype=float)
    x1 = scenario.x1
    e1 = 6.0 * (x1 - x0 - 0.5 * (v0 + vS) * t1) ** 2 / t1**3 + (vS - v0) ** 2 / (2.0 * t1)
    return e1 + scenario.escape(np.full_like(vS, x1), vS)


def constrained_glosa(scenario: Scenario, t1: float, state: VehicleState | None = None,
                      kernels=backend) -> DeterministicSolution:
    """Deterministic GLOSA with the signal at ``x1`` turning green at ``t1``.

    If the free solution reaches ``x1`` no earlier than ``t1`` it is returned;
    otherwise the vehicle crosses ``x1`` exactly at ``t1`` with the speed that
    minimizes the two-segment cost over ``[0, v_max]`` (node scan, then a
    bracketed 1-D search). The tail after ``t1``
    follows the scenario's escape model; under ``"remaining_horizon"`` the
    cost also carries ``w*t1``.
    """
    if t1 < 0:
        raise ValueError("t1 must be non-negative")
    s0 = state if state is not None else VehicleState(scenario.x0, scenario.v0)
    x0, v0 = float(s0.x), float(s0.v)
    x1, w = scenario.x1, scenario.w
    free = free_glosa(scenario, s0)
    if t1 == 0 or (x0 < x1 and free.segments and free.te >= t1
                   and free.segments[0].max_position(t1) <= x1 + 1e-12):
        return DeterministicSolution(free.te, free.cost, free.segments,
                                     t_S=crossing_time(free, x1), w=w)
    if x0 >= x1:
        raise InvalidScenario("vehicle already at the signal with a red light and t1 > 0")
    vS, _ = kernels.two_segment_search(x0, v0, x1, t1, scenario.bounds.v_max, *scenario.escape_args)
    c1, c2 = cubic_coefficients(x0, v0, x1, vS, t1)
    seg1 = Segment(0.0, t1, x0, v0, c1, c2)
    tail = free_glosa(scenario, VehicleState(x1, vS))
    segs = [seg1]
    if tail.segments:
        t2 = tail.segments[0]
        segs.append(Segment(t1, t2.duration, x1, vS, t2.c1, t2.c2))
    # segment 1 reaching x1 before t1 is reported, not prevented
    overshoot = seg1.max_position(t1) > x1 + 1e-9
    cost = seg1.energy + tail.cost
    if scenario.escape_model == "remaining_horizon":
        cost += w * t1
    return DeterministicSolution(t1 + tail.te, cost, tuple(segs), t_S=t1, overshoot=overshoot, w=w)


class InfeasibleInitializer(ValueError):
    pass


def speeds_at(sol: DeterministicSolution, times: np.ndarray) -> np.ndarray:
    """Speed of the continuous solution at sorted ``times``; constant past
    the end."""
    times = np.asarray(times, dtype=float)
    if not sol.segments:
        return np.zeros(times.shape)
    out = None
    # the last segment also covers times past the end (speed held)
    for seg in reversed(sol.segments):
        end = seg.t0 + seg.duration
        s = np.minimum(times, end) - seg.t0
        val = seg.v_start + s * (seg.c1 + 0.5 * seg.c2 * s)
        out = val if out is None else np.where(times <= end, val, out)
    return out


def sample_controls(sol: DeterministicSolution, state: VehicleState, K: int, T: float,
                    bounds: Bounds, delta: float | None = None, kernels=backend) -> Trajectory:
    """Discrete-time trajectory that tracks the continuous solution's speed.

    Accelerations are speed differences over each period, clamped to what
    keeps the next state inside ``bounds``; with ``delta`` they are also
    rounded onto the ``delta`` grid (tracking the accumulated rounding error).
    Positions are re-simulated so the discrete kinematics hold exactly.
    """
    vt = speeds_at(sol, np.arange(K + 1) * T)
    xs, vs, acc, fail = kernels.track_speed(vt, float(state.x), float(state.v), T,
                                            bounds.as_tuple(), delta or 0.0)
    if fail >= 0:
        raise InfeasibleInitializer(f"no admissible control at step {fail} from "
                                    f"x={xs[fail]:.4f}, v={vs[fail]:.4f}")
    return Trajectory(np.asarray(xs), np.asarray(vs), np.asarray(acc), T)


def pessimistic_trajectory(scenario: Scenario, delta: float | None = None,
                           state: VehicleState | None = None) -> Trajectory:
    """Deterministic solution assuming the light switches at the last
    admissible step, sampled onto the discrete horizon."""
    K = scenario.prior.k_max
    s0 = state if state is not None else VehicleState(scenario.x0, scenario.v0)
    sol = constrained_glosa(scenario, K * scenario.T, s0)
    return sample_controls(sol, s0, K, scenario.T, scenario.bounds, delta)
