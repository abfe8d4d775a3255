"""Problem definition: vehicle kinematics, switching-time stochastics,
scenario validation and the expected (stochastic) trajectory cost."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import backend


class VehicleState(NamedTuple):
    x: float
    v: float


class WindowExhausted(ValueError):
    """Raised when a query lies at or past the last admissible switching step."""


def step_kinematics(s: VehicleState, a: float, T: float) -> VehicleState:
    """Advance position and speed over one period of constant acceleration."""
    if T <= 0:
        raise ValueError("T must be positive")
    return VehicleState(s.x + s.v * T + 0.5 * a * T * T, s.v + a * T)


@dataclass(frozen=True)
class SwitchingPrior:
    """A-priori distribution of the discrete switching step on [k_min, k_max].

    ``probs[i]`` is the probability of switching at step ``k_min + i``. Uniform
    priors keep exact :class:`~fractions.Fraction` weights so that the
    conditional switching probabilities telescope without drift.
    """

    k_min: int
    k_max: int
    probs: tuple

    def __post_init__(self):
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        if len(self.probs) != self.k_max - self.k_min + 1:
            raise ValueError("probs must have one entry per step in [k_min, k_max]")
        if any(p < 0 for p in self.probs):
            raise ValueError("probabilities must be non-negative")
        total = sum(self.probs)
        if abs(float(total) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {float(total)!r}, not 1")
        if self.probs[0] == 0 or self.probs[-1] == 0:
            raise ValueError("window must start and end on a step with positive mass")

    @classmethod
    def uniform(cls, k_min: int, k_max: int) -> SwitchingPrior:
        n = k_max - k_min + 1
        return cls(k_min, k_max, tuple(Fraction(1, n) for _ in range(n)))

    @classmethod
    def from_probabilities(cls, k_min: int, probs: Sequence[float]) -> SwitchingPrior:
        """Build from raw weights; zero mass at either end is trimmed and the
        remainder renormalized."""
        w = [float(p) for p in probs]
        if any(p < 0 for p in w) or sum(w) <= 0:
            raise ValueError("weights must be non-negative with positive sum")
        # normalize before trimming: tiny weights may underflow to zero
        total = sum(w)
        w = [p / total for p in w]
        lo = next(i for i, p in enumerate(w) if p > 0)
        hi = max(i for i, p in enumerate(w) if p > 0)
        w = w[lo:hi + 1]
        total = sum(w)
        w = [p / total for p in w]
        return cls(k_min + lo, k_min + hi, tuple(w))

    @classmethod
    def from_mapping(cls, probs: Mapping[int, float]) -> SwitchingPrior:
        k_min, k_max = min(probs), max(probs)
        return cls.from_probabilities(k_min, [probs.get(k, 0.0) for k in range(k_min, k_max + 1)])

    def P(self, k: int):
        if self.k_min <= k <= self.k_max:
            return self.probs[k - self.k_min]
        return 0

    @cached_property
    def switch_probabilities(self) -> np.ndarray:
        """p(0|k) for k = 0 .. k_max-1 as floats."""
        return np.array([float(_switch_probability(self, k)) for k in range(self.k_max)])

    @cached_property
    def survival(self) -> np.ndarray:
        """Probability that no switch happened before step k, k = 0 .. k_max-1."""
        p = self.switch_probabilities
        return np.concatenate(([1.0], np.cumprod(1.0 - p)[:-1]))

    def to_dict(self) -> dict:
        if all(p == self.probs[0] for p in self.probs) and isinstance(self.probs[0], Fraction):
            return {"kind": "uniform", "k_min": self.k_min, "k_max": self.k_max}
        return {"kind": "explicit", "k_min": self.k_min, "probs": [float(p) for p in self.probs]}


def _switch_probability(prior: SwitchingPrior, k: int):
    if k < 0:
        raise ValueError("k must be non-negative")
    if k >= prior.k_max:
        raise WindowExhausted(f"k={k} is past the last switching step k_max-1={prior.k_max - 1}")
    if k < prior.k_min - 1:
        return 0
    tail = sum(prior.probs[k + 1 - prior.k_min:])
    return prior.P(k + 1) / tail


def switch_probability(prior: SwitchingPrior, k: int) -> float:
    """Probability that the light switches at step k+1 given it has not
    switched up to step k (crop-and-scale)."""
    return float(_switch_probability(prior, k))


def condition_prior(prior: SwitchingPrior, k_now: int) -> SwitchingPrior:
    """Restrict the prior to switching steps after ``k_now`` and renormalize."""
    if k_now >= prior.k_max:
        raise WindowExhausted(f"no switching mass remains after k={k_now}")
    if k_now < prior.k_min:
        return prior
    rest = prior.probs[k_now + 1 - prior.k_min:]
    total = sum(rest)
    if isinstance(total, Fraction):
        return SwitchingPrior(k_now + 1, prior.k_max, tuple(p / total for p in rest))
    return SwitchingPrior.from_probabilities(k_now + 1, rest)


def shift_prior(prior: SwitchingPrior, k_now: int) -> SwitchingPrior:
    """Condition on no switch up to ``k_now`` and re-index so that ``k_now``
    becomes step 0."""
    c = condition_prior(prior, k_now)
    k_min = max(c.k_min, k_now + 1)
    probs = c.probs[k_min - c.k_min:]
    return SwitchingPrior(k_min - k_now, c.k_max - k_now, probs)


@dataclass
class SwitchingProcess:
    """One realization of the switching process.

    ``z[k]`` is 0 exactly at ``k = realized_k1 - 1``; ``virtual[k]`` is the
    no-switch-yet indicator, with ``virtual[0] = 1``.
    """

    realized_k1: int
    z: list
    virtual: list


def sample_switching_process(prior: SwitchingPrior, rng: np.random.Generator) -> SwitchingProcess:
    """Draw one uniform number per step and switch when it falls below p(0|k)."""
    p = prior.switch_probabilities
    z, virtual = [], [1]
    for k in range(prior.k_max):
        zk = 0 if rng.random() < p[k] else 1
        z.append(zk)
        virtual.append(virtual[-1] * zk)
        if zk == 0:
            return SwitchingProcess(k + 1, z, virtual)
    raise AssertionError("p(0|k_max-1) = 1 guarantees a switch")


def sample_switching_steps(prior: SwitchingPrior, rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorized ``n`` realizations of the switching step."""
    p = prior.switch_probabilities
    u = rng.random((n, prior.k_max))
    hit = u < p[None, :]
    return np.argmax(hit, axis=1) + 1


@dataclass(frozen=True)
class Bounds:
    x_min: float = 0.0
    x_max: float = 150.0
    v_min: float = 0.0
    v_max: float = 16.0
    a_min: float = -3.0
    a_max: float = 3.0

    def as_tuple(self) -> tuple:
        return (self.x_min, self.x_max, self.v_min, self.v_max, self.a_min, self.a_max)


ESCAPE_MODELS = ("energy", "remaining_horizon")


@dataclass(frozen=True)
class Scenario:
    x0: float
    v0: float
    xe: float
    ve: float
    x1: float
    w: float = 0.1
    T: float = 1.0
    bounds: Bounds = field(default_factory=Bounds)
    prior: SwitchingPrior = field(default_factory=lambda: SwitchingPrior.uniform(10, 30))
    name: str = ""
    escape_model: str = "energy"

    def __post_init__(self):
        if self.escape_model not in ESCAPE_MODELS:
            raise ValueError(f"escape_model must be one of {ESCAPE_MODELS}, got {self.escape_model!r}")

    @property
    def horizon(self) -> int:
        return self.prior.k_max

    def with_initial(self, x0: float, v0: float) -> Scenario:
        return replace(self, x0=x0, v0=v0)

    @property
    def escape_args(self) -> tuple:
        """(xe, ve, horizon weight, energy_only) as taken by the kernels."""
        if self.escape_model == "remaining_horizon":
            return (self.xe, self.ve, self.w, False)
        return (self.xe, self.ve, 0.5 * self.w, True)

    def escape_horizon(self, x, v):
        """Escape cost and post-switch horizon at states (arrays).

        ``"remaining_horizon"``: the free-horizon optimum of
        ``w*te + 1/2 int a^2``, time penalty included.
        ``"energy"``: the horizon minimizes ``1/2 int (a^2 + w) dt`` and only
        the acceleration energy is charged.
        """
        if self.escape_model == "remaining_horizon":
            return backend.escape_batch(x, v, self.xe, self.ve, self.w)
        wt = 0.5 * self.w
        cost, te = backend.escape_batch(x, v, self.xe, self.ve, wt)
        return cost - wt * te, te

    def escape(self, x, v):
        """Escape cost (deterministic cost-to-go once green) at states."""
        return self.escape_horizon(x, v)[0]

    def escape_scalar(self, x: float, v: float) -> tuple[float, float]:
        if self.escape_model == "remaining_horizon":
            return backend.escape_scalar(float(x), float(v), self.xe, self.ve, self.w)
        wt = 0.5 * self.w
        cost, te = backend.escape_scalar(float(x), float(v), self.xe, self.ve, wt)
        return cost - wt * te, te

    def to_dict(self) -> dict:
        b = self.bounds
        return {
            "name": self.name, "x0": self.x0, "v0": self.v0, "xe": self.xe, "ve": self.ve,
            "x1": self.x1, "w": self.w, "T": self.T,
            "bounds": {"x_min": b.x_min, "x_max": b.x_max, "v_min": b.v_min,
                       "v_max": b.v_max, "a_min": b.a_min, "a_max": b.a_max},
            "prior": self.prior.to_dict(), "escape_model": self.escape_model,
        }


def validate_scenario(s: Scenario) -> list[str]:
    """Every violated scenario invariant; an empty list means valid."""
    out = []
    b = s.bounds
    if not (s.x0 <= s.x1 <= s.xe):
        out.append("x0 ≤ x1 ≤ xe")
    if not s.w > 0:
        out.append("w > 0")
    if not s.T > 0:
        out.append("T > 0")
    if not (b.a_min < 0 < b.a_max):
        out.append("a_min < 0 < a_max")
    if not b.v_min >= 0:
        out.append("v_min ≥ 0")
    if not b.x_min <= b.x_max:
        out.append("x_min ≤ x_max")
    if not b.v_min <= b.v_max:
        out.append("v_min ≤ v_max")
    if not (b.x_min <= s.x0 <= b.x_max):
        out.append("x_min ≤ x0 ≤ x_max")
    if not (b.v_min <= s.v0 <= b.v_max):
        out.append("v_min ≤ v0 ≤ v_max")
    return out


SCENARIOS = {
    1: Scenario(x0=0.0, v0=5.0, xe=220.0, ve=11.0, x1=150.0, name="scenario1"),
    2: Scenario(x0=0.0, v0=11.0, xe=220.0, ve=11.0, x1=150.0, name="scenario2"),
    3: Scenario(x0=50.0, v0=11.0, xe=220.0, ve=11.0, x1=150.0, name="scenario3"),
}


@dataclass
class Trajectory:
    """States at k = 0..K, accelerations at k = 0..K-1, and expected cost."""

    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    T: float
    cost: float = float("nan")

    @property
    def K(self) -> int:
        return len(self.a)

    @property
    def states(self) -> list[VehicleState]:
        return [VehicleState(float(x), float(v)) for x, v in zip(self.x, self.v)]

    @classmethod
    def from_controls(cls, x0: float, v0: float, accels, T: float) -> Trajectory:
        a = np.asarray(accels, dtype=float)
        x = np.empty(len(a) + 1)
        v = np.empty(len(a) + 1)
        x[0], v[0] = x0, v0
        for k, ak in enumerate(a):
            x[k + 1] = x[k] + v[k] * T + 0.5 * ak * T * T
            v[k + 1] = v[k] + ak * T
        return cls(x, v, a, T)


def in_bounds(traj: Trajectory, bounds: Bounds, tol: float = 1e-9) -> bool:
    b = bounds
    return bool(
        np.all(traj.x >= b.x_min - tol) and np.all(traj.x <= b.x_max + tol)
        and np.all(traj.v >= b.v_min - tol) and np.all(traj.v <= b.v_max + tol)
        and np.all(traj.a >= b.a_min - tol) and np.all(traj.a <= b.a_max + tol)
    )


def expected_cost(scenario: Scenario, x, v, a, kernels=backend) -> float:
    """Expected cost of a no-switch trajectory:

        sum_k S(k) * (a(k)^2 / 2 + p(0|k) * J(x(k+1)))

    where S(k) is the probability that no switch happened before k and J is
    the escape cost.
    """
    p = scenario.prior.switch_probabilities
    a = np.ascontiguousarray(a, dtype=float)
    K = len(p)
    if len(a) != K:
        raise ValueError(f"expected {K} controls, got {len(a)}")
    x = np.ascontiguousarray(x, dtype=float)
    v = np.ascontiguousarray(v, dtype=float)
    if len(x) < K + 1 or len(v) < K + 1:
        raise ValueError("need K+1 states")
    return kernels.expected_cost(x, v, a, p, *scenario.escape_args)


def trajectory_cost(scenario: Scenario, traj: Trajectory) -> float:
    """Expected cost, +inf if the trajectory leaves the bounds."""
    if not in_bounds(traj, scenario.bounds):
        return float("inf")
    return expected_cost(scenario, traj.x, traj.v, traj.a)
