"""Independent reference solutions shared by the unit and acceptance tests."""

import itertools

import numpy as np
from scipy.optimize import minimize

from sglosa.model import Bounds, Scenario, SwitchingPrior
from sglosa.sdp import Grid


def random_tiny_instance(rng):
    """At most 5 stages and 7 controls on a coarse grid (delta = 1)."""
    k_max = int(rng.integers(2, 6))
    k_min = int(rng.integers(1, k_max + 1))
    w = rng.uniform(0.2, 1.0, k_max - k_min + 1)
    prior = SwitchingPrior.from_probabilities(k_min, w)
    a_max = int(rng.integers(1, 4))  # 3, 5 or 7 controls
    x1 = float(rng.integers(8, 30))
    bounds = Bounds(0.0, x1, 0.0, float(rng.integers(3, 7)), -float(a_max), float(a_max))
    x0 = 0.5 * int(rng.integers(0, 6))
    v0 = float(rng.integers(0, int(bounds.v_max) + 1))
    model = ["energy", "remaining_horizon"][int(rng.integers(0, 2))]
    return Scenario(x0, v0, x1 + float(rng.integers(10, 60)), float(rng.integers(1, 8)), x1,
                    w=float(rng.uniform(0.05, 0.5)), bounds=bounds, prior=prior, escape_model=model)


def enumerate_open_loop(sc, delta=1.0):
    """Minimum expected cost over every control sequence of the no-switch
    branch; a sequence that leaves the grid is discarded. Evaluated on
    integer node indices with the same fold as the recursion."""
    g = Grid.for_scenario(sc, delta)
    p = sc.prior.switch_probabilities
    K = len(p)
    seqs = np.array(list(itertools.product(range(g.ia_lo, g.ia_hi + 1), repeat=K)))
    n = len(seqs)
    ix = np.full((n, K + 1), round(sc.x0 / g.dx))
    iv = np.full((n, K + 1), round(sc.v0 / g.dv))
    for k in range(K):
        ix[:, k + 1] = ix[:, k] + 2 * iv[:, k] + seqs[:, k]
        iv[:, k + 1] = iv[:, k] + seqs[:, k]
    ok = ((ix >= g.ix_lo) & (ix <= g.ix_hi) & (iv >= g.iv_lo) & (iv <= g.iv_hi)).all(axis=1)
    c = np.zeros(n)
    for k in range(K - 1, -1, -1):
        a = seqs[:, k] * delta
        phi = 0.5 * a * a
        if p[k] < 1.0:
            phi = phi + (1.0 - p[k]) * c
        if p[k] > 0.0:
            phi = phi + p[k] * sc.escape(ix[:, k + 1] * g.dx, iv[:, k + 1] * g.dv)
        c = phi
    c = np.where(ok, c, np.inf)
    i = int(np.argmin(c))
    return c[i], seqs[i]


def deterministic_discrete_optimum(sc, k1):
    """Known switching step: minimize 1/2 sum a^2 + J(x(k1)) over the first
    k1 controls subject to the state and control bounds (SLSQP, two starts)."""
    T, b = sc.T, sc.bounds

    def roll(a):
        x, v = [sc.x0], [sc.v0]
        for ai in a:
            x.append(x[-1] + v[-1] * T + 0.5 * ai * T * T)
            v.append(v[-1] + ai * T)
        return np.array(x), np.array(v)

    def f(a):
        x, v = roll(a)
        return 0.5 * float(a @ a) + sc.escape_scalar(x[-1], v[-1])[0]

    def g(a):
        x, v = roll(a)
        return np.r_[x[1:] - b.x_min, b.x_max - x[1:], v[1:] - b.v_min, b.v_max - v[1:]]

    best = None
    for a0 in (np.zeros(k1), np.full(k1, -0.3)):
        r = minimize(f, a0, method="SLSQP", bounds=[(b.a_min, b.a_max)] * k1,
                     constraints=[{"type": "ineq", "fun": g}],
                     options={"ftol": 1e-14, "maxiter": 1000})
        if best is None or r.fun < best.fun:
            best = r
    return float(best.fun), best.x
