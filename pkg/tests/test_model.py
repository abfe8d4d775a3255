from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sglosa.model import (Bounds, SCENARIOS, Scenario, SwitchingPrior, Trajectory, VehicleState,
                          WindowExhausted, condition_prior, expected_cost, in_bounds,
                          sample_switching_process, sample_switching_steps, shift_prior,
                          step_kinematics, switch_probability, trajectory_cost, validate_scenario)

UNIFORM = SwitchingPrior.uniform(10, 30)


# -- kinematics ---------------------------------------------------------------

@pytest.mark.parametrize("s, a, expected", [
    ((0.0, 5.0), 1.0, (5.5, 6.0)),
    ((10.0, 11.0), 0.0, (21.0, 11.0)),
    ((50.0, 11.0), -3.0, (59.5, 8.0)),  # 50 + 11 - 1.5
])
def test_step_kinematics_examples(s, a, expected):
    assert step_kinematics(VehicleState(*s), a, 1.0) == pytest.approx(expected, abs=1e-12)


def test_step_kinematics_rejects_nonpositive_T():
    with pytest.raises(ValueError):
        step_kinematics(VehicleState(0.0, 1.0), 0.0, 0.0)


@given(st.integers(-4000, 4000), st.integers(-200, 200), st.integers(-40, 40),
       st.sampled_from([1.0, 0.5, 0.25, 0.125]), st.sampled_from([1.0, 0.5, 2.0]))
def test_grid_closure(ix, iv, ia, delta, T):
    dx, dv = 0.5 * delta * T * T, delta * T
    nxt = step_kinematics(VehicleState(ix * dx, iv * dv), ia * delta, T)
    # integer node arithmetic: ix' = ix + 2 iv + ia, iv' = iv + ia
    assert nxt.x / dx == pytest.approx(ix + 2 * iv + ia, abs=1e-9)
    assert nxt.v / dv == pytest.approx(iv + ia, abs=1e-9)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=30))
def test_trajectory_from_controls_obeys_kinematics(accels):
    tr = Trajectory.from_controls(3.0, 7.0, accels, 1.0)
    for k, a in enumerate(accels):
        nxt = step_kinematics(tr.states[k], a, 1.0)
        assert tr.x[k + 1] == pytest.approx(nxt.x, abs=1e-9)
        assert tr.v[k + 1] == pytest.approx(nxt.v, abs=1e-12)


# -- switching probabilities --------------------------------------------------

def _oracle_conditional(prior, k):
    """P(switch at k+1 | no switch at steps <= k) by enumerating the
    switching step with exact weights."""
    steps = range(prior.k_min, prior.k_max + 1)
    later = [Fraction(prior.P(j)) for j in steps if j > k]
    return Fraction(prior.P(k + 1)) / sum(later)


@pytest.mark.parametrize("k, expected", [(8, 0), (9, Fraction(1, 21)), (10, Fraction(1, 20)), (29, 1)])
def test_switch_probability_uniform_examples(k, expected):
    assert switch_probability(UNIFORM, k) == pytest.approx(float(expected), abs=1e-15)
    assert _oracle_conditional(UNIFORM, k) == expected


def test_switch_probability_matches_enumeration_everywhere():
    for k in range(UNIFORM.k_max):
        assert switch_probability(UNIFORM, k) == pytest.approx(float(_oracle_conditional(UNIFORM, k)),
                                                               rel=1e-15)


@pytest.mark.parametrize("k", [30, 31, 100])
def test_switch_probability_out_of_window(k):
    with pytest.raises(WindowExhausted):
        switch_probability(UNIFORM, k)


def test_switch_probability_negative_step():
    with pytest.raises(ValueError):
        switch_probability(UNIFORM, -1)


priors = st.builds(
    lambda k_min, ws: SwitchingPrior.from_probabilities(k_min, ws),
    st.integers(1, 12),
    st.lists(st.floats(0.0, 10.0), min_size=1, max_size=15).filter(lambda w: w[0] > 0 and w[-1] > 0),
)


def _realization_probabilities(prior):
    p = prior.switch_probabilities
    out, surv = [], 1.0
    for k in range(prior.k_max):
        out.append(surv * p[k])
        surv *= 1.0 - p[k]
    return np.array(out)


@given(priors)
def test_probability_completeness(prior):
    assert _realization_probabilities(prior).sum() == pytest.approx(1.0, abs=1e-9)
    assert switch_probability(prior, prior.k_max - 1) == 1.0


@given(priors)
def test_realization_probabilities_reproduce_prior(prior):
    q = _realization_probabilities(prior)
    for k1 in range(1, prior.k_max + 1):
        assert q[k1 - 1] == pytest.approx(float(prior.P(k1)), abs=1e-12)


@given(priors)
def test_conditioning_consistency(prior):
    c = condition_prior(prior, prior.k_min - 1)
    for k in range(prior.k_min - 1, prior.k_max):
        assert switch_probability(c, k) == pytest.approx(switch_probability(prior, k), abs=1e-12)


@given(priors, st.data())
def test_condition_prior_renormalizes(prior, data):
    k_now = data.draw(st.integers(0, prior.k_max - 1))
    c = condition_prior(prior, k_now)
    assert float(sum(c.probs)) == pytest.approx(1.0, abs=1e-12)
    assert c.k_min > min(k_now, prior.k_min - 1)
    # conditional switching probabilities are unchanged after conditioning
    for k in range(max(k_now, c.k_min - 1), prior.k_max):
        assert switch_probability(c, k) == pytest.approx(switch_probability(prior, k), abs=1e-12)


def test_condition_prior_examples():
    assert condition_prior(UNIFORM, 5) is UNIFORM
    c = condition_prior(UNIFORM, 10)
    assert (c.k_min, c.k_max) == (11, 30)
    assert all(p == Fraction(1, 20) for p in c.probs)
    d = condition_prior(SwitchingPrior.from_mapping({10: 1.0}), 9)
    assert (d.k_min, d.k_max, d.probs) == (10, 10, (1.0,))
    assert switch_probability(d, 9) == 1.0
    with pytest.raises(WindowExhausted):
        condition_prior(UNIFORM, 30)


def test_shift_prior_reindexes():
    s = shift_prior(UNIFORM, 12)
    assert (s.k_min, s.k_max) == (1, 18)
    for k in range(18):
        assert switch_probability(s, k) == pytest.approx(switch_probability(UNIFORM, k + 12), abs=1e-15)


def test_uniform_prior_is_exact():
    assert sum(UNIFORM.probs) == 1
    assert all(isinstance(p, Fraction) for p in UNIFORM.probs)


@pytest.mark.parametrize("args", [
    (0, 5, (0.5, 0.5, 0, 0, 0, 0)),      # k_min < 1
    (5, 4, ()),                          # k_max < k_min
    (1, 2, (0.5, 0.6)),                  # does not sum to 1
    (1, 2, (1.2, -0.2)),                 # negative mass
    (1, 3, (0.5, 0.5)),                  # wrong length
])
def test_prior_validation(args):
    with pytest.raises(ValueError):
        SwitchingPrior(*args)


def test_from_probabilities_trims_and_renormalizes():
    pr = SwitchingPrior.from_probabilities(3, [0, 0, 2, 1, 1, 0])
    assert (pr.k_min, pr.k_max) == (5, 7)
    assert pr.probs == pytest.approx((0.5, 0.25, 0.25))


# -- switching process --------------------------------------------------------

@given(priors, st.integers(0, 2**32 - 1))
def test_switching_process_invariants(prior, seed):
    proc = sample_switching_process(prior, np.random.default_rng(seed))
    assert proc.virtual[0] == 1
    for k, z in enumerate(proc.z):
        assert proc.virtual[k + 1] == proc.virtual[k] * z
    assert proc.z.count(0) == 1
    assert proc.z.index(0) == proc.realized_k1 - 1
    assert prior.k_min <= proc.realized_k1 <= prior.k_max
    assert prior.P(proc.realized_k1) > 0


def test_switching_process_uses_one_draw_per_step():
    prior = SwitchingPrior.uniform(3, 6)
    rng_a, rng_b = np.random.default_rng(7), np.random.default_rng(7)
    proc = sample_switching_process(prior, rng_a)
    rng_b.random(proc.realized_k1)
    assert rng_a.random() == rng_b.random()


def test_vectorized_sampler_support():
    steps = sample_switching_steps(UNIFORM, np.random.default_rng(0), 5000)
    assert steps.min() >= 10 and steps.max() <= 30
    assert set(np.unique(steps)) == set(range(10, 31))


# -- scenarios ----------------------------------------------------------------

@pytest.mark.parametrize("i", [1, 2, 3])
def test_builtin_scenarios_valid(i):
    assert validate_scenario(SCENARIOS[i]) == []


@pytest.mark.parametrize("changes, message", [
    ({"w": 0.0}, "w > 0"),
    ({"x1": 300.0}, "x0 ≤ x1 ≤ xe"),
    ({"T": 0.0}, "T > 0"),
    ({"bounds": Bounds(a_min=0.5)}, "a_min < 0 < a_max"),
    ({"bounds": Bounds(v_min=-1.0)}, "v_min ≥ 0"),
    ({"v0": 20.0}, "v_min ≤ v0 ≤ v_max"),
])
def test_validate_scenario_violations(changes, message):
    from dataclasses import replace
    assert message in validate_scenario(replace(SCENARIOS[1], **changes))


def test_validate_scenario_reports_every_violation():
    from dataclasses import replace
    bad = validate_scenario(replace(SCENARIOS[1], w=-1.0, T=-1.0, x1=300.0))
    assert {"w > 0", "T > 0", "x0 ≤ x1 ≤ xe"} <= set(bad)


def test_unknown_escape_model():
    with pytest.raises(ValueError):
        Scenario(0, 5, 220, 11, 150, escape_model="elapsed")


# -- expected cost ------------------------------------------------------------

def _naive_expected_cost(sc, traj):
    """Enumerate the switching step: cost = sum_k1 P(k1) * (energy before k1
    + escape cost from the state at k1)."""
    total = 0.0
    for k1 in range(sc.prior.k_min, sc.prior.k_max + 1):
        energy = 0.5 * float(np.sum(traj.a[:k1] ** 2))
        tail = sc.escape_scalar(traj.x[k1], traj.v[k1])[0]
        total += float(sc.prior.P(k1)) * (energy + tail)
    return total


@pytest.mark.parametrize("model", ["energy", "remaining_horizon"])
def test_expected_cost_matches_enumeration(kernels, model, rng):
    from dataclasses import replace
    sc = replace(SCENARIOS[1], escape_model=model)
    for _ in range(5):
        a = rng.uniform(-0.3, 0.3, sc.prior.k_max)
        tr = Trajectory.from_controls(sc.x0, sc.v0, a, sc.T)
        got = expected_cost(sc, tr.x, tr.v, tr.a, kernels=kernels)
        assert got == pytest.approx(_naive_expected_cost(sc, tr), rel=1e-12)


def test_expected_cost_nonuniform_prior(kernels):
    from dataclasses import replace
    sc = replace(SCENARIOS[2], prior=SwitchingPrior.from_mapping({3: 0.2, 5: 0.5, 8: 0.3}))
    tr = Trajectory.from_controls(sc.x0, sc.v0, np.linspace(-1, 0.5, 8), sc.T)
    got = expected_cost(sc, tr.x, tr.v, tr.a, kernels=kernels)
    assert got == pytest.approx(_naive_expected_cost(sc, tr), rel=1e-12)


def test_expected_cost_shape_errors():
    sc = SCENARIOS[1]
    with pytest.raises(ValueError):
        expected_cost(sc, np.zeros(31), np.zeros(31), np.zeros(29))


def test_trajectory_cost_out_of_bounds_is_inf():
    sc = SCENARIOS[1]
    tr = Trajectory.from_controls(sc.x0, sc.v0, np.full(30, 0.5), sc.T)  # exceeds v_max
    assert not in_bounds(tr, sc.bounds)
    assert trajectory_cost(sc, tr) == float("inf")
