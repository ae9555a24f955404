import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoii_lab import belief as bl
from aoii_lab.belief import MAP
from aoii_lab.chain import P1, P2, TransitionMatrix
from aoii_lab import policy as policy_mod
from aoii_lab.policy import (AlwaysPull, BracketFailure, NeverPull, RandomPolicy, SteeredPolicy,
                             SteeringState, ThresholdPolicy, UniformPolicy, calibrate_lambda,
                             calibrate_threshold, decide, isotonic_nonincreasing, measured_rate,
                             steering_run)
from aoii_lab.sim import run

# A chain whose no-pull expected age overshoots its plateau, so even the
# largest searched threshold keeps pulling often.
SWINGING = TransitionMatrix([[0.1, 0.9], [0.8, 0.2]])


def pulls(policy, T, seed=0, b=None):
    rng = np.random.default_rng(seed)
    steering = policy.new_steering() if hasattr(policy, "new_steering") else None
    b = bl.point_mass(2, 15, 1) if b is None else b
    return [decide(policy, b, t, steering, rng) for t in range(1, T + 1)]


def test_uniform_schedule_example():
    a = pulls(UniformPolicy(0.3), 20)
    assert [t for t, x in enumerate(a, 1) if x] == [3, 7, 10, 13, 17, 20]


@pytest.mark.parametrize("alpha, first", [(0.5, [2, 4, 6]), (1.0, [1, 2, 3]), (0.4, [3, 5, 8]), (0.25, [4, 8, 12])])
def test_uniform_half_up_rounding(alpha, first):
    a = pulls(UniformPolicy(alpha), 12)
    assert [t for t, x in enumerate(a, 1) if x][:3] == first


def test_uniform_zero_never_pulls():
    assert sum(pulls(UniformPolicy(0.0), 1000)) == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(200, 3000))
def test_uniform_meets_budget(alpha, T):
    assert abs(sum(pulls(UniformPolicy(alpha), T)) / T - alpha) <= 2 / T


def test_threshold_zero_always_pulls():
    assert run(ThresholdPolicy(0.0), P2, MAP, 5000, 0).metrics.rate == 1


@pytest.mark.parametrize("p", [P1, P2], ids=["P1", "P2"])
def test_threshold_above_plateau_never_pulls(p):
    plateau = bl.expected_aoii(bl.steady_state_belief(p, 15))
    # from a known start the expected age can overshoot the plateau for a few slots
    assert run(ThresholdPolicy(plateau + 1e-6), p, MAP, 20000, 0, burn_in=1000).metrics.rate == 0


def test_threshold_pulls_on_equality():
    b = np.zeros((2, 16))
    b[0, 0], b[1, 2] = 0.5, 0.5
    assert ThresholdPolicy(1.0).decide(b, 1) == 1
    assert ThresholdPolicy(1.0 + 1e-12).decide(b, 1) == 0


def test_threshold_rate_nonincreasing():
    plateau = bl.expected_aoii(bl.steady_state_belief(P1, 15))
    T, seeds = 5000, [0, 1]
    taus = np.linspace(0, plateau, 20)
    rates = [measured_rate(ThresholdPolicy(t), P1, MAP, T, seeds, 15) for t in taus]
    sigma = np.sqrt(0.25 / (T * len(seeds)))
    for r0, r1 in zip(rates, rates[1:]):
        assert r1 <= r0 + sigma


def test_policy_argument_checks():
    with pytest.raises(ValueError):
        RandomPolicy(1.5)
    with pytest.raises(ValueError):
        UniformPolicy(-0.1)
    with pytest.raises(ValueError):
        ThresholdPolicy(-1)


@pytest.mark.parametrize("make", [lambda: RandomPolicy(0.3), lambda: UniformPolicy(0.3), NeverPull, AlwaysPull],
                         ids=["random", "uniform", "never", "always"])
def test_belief_agnostic_decisions_ignore_belief(make):
    rng = np.random.default_rng(3)
    beliefs = [rng.dirichlet(np.ones(32)).reshape(2, 16) for _ in range(500)]
    shuffled = [beliefs[i] for i in rng.permutation(500)]
    a = [make().decide(b, t, None, np.random.default_rng(t)) for t, b in enumerate(beliefs, 1)]
    c = [make().decide(b, t, None, np.random.default_rng(t)) for t, b in enumerate(shuffled, 1)]
    assert a == c


# steering

def test_steering_never_always_alternates():
    a = pulls(SteeredPolicy(NeverPull(), AlwaysPull(), 0.5), 2000)
    assert a[:6] == [1, 0, 0, 1, 0, 1]
    assert all(x != y for x, y in zip(a[2:], a[3:]))
    assert sum(a) / len(a) == pytest.approx(0.5, abs=1e-3)


def test_steering_tie_applies_minus():
    s = SteeringState(1, 2)
    assert SteeredPolicy(NeverPull(), AlwaysPull(), 0.5).decide(None, 3, s) == 0
    assert (s.pulls_so_far, s.slots_so_far) == (1, 3)


def test_steering_same_pair_is_single_policy():
    inner = UniformPolicy(0.3)
    assert pulls(SteeredPolicy(inner, inner, 0.7), 500) == pulls(inner, 500)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(100, 5000))
def test_steering_deterministic_pair_hits_budget(alpha, T):
    a = pulls(SteeredPolicy(NeverPull(), AlwaysPull(), alpha), T)
    assert abs(sum(a) / T - alpha) <= 1 / T + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_steering_random_pair_concentrates(seed):
    T = 20000
    m = steering_run(RandomPolicy(0.1), RandomPolicy(0.6), 0.3, P1, MAP, T, seed).metrics
    assert abs(m.rate - 0.3) <= max(10 / T, 1e-3)


# threshold calibration

@pytest.mark.slow
def test_calibrate_threshold_brackets_budget():
    br = calibrate_threshold(P1, MAP, 0.2)
    assert br.rate_minus <= 0.2 <= br.rate_plus
    assert br.tau_plus <= br.tau_minus
    # fresh seeds: the bracket still holds up to simulation noise
    lo, hi = br.policies()
    fresh = [500, 501, 502]
    assert measured_rate(lo, P1, MAP, 10**5, fresh, 15) <= 0.2 + 1e-3
    assert measured_rate(hi, P1, MAP, 10**5, fresh, 15) >= 0.2 - 1e-3


def test_calibrate_threshold_degenerate_bracket_on_exact_hit(monkeypatch):
    # a linear rate curve hits alpha = 0.5 exactly at the first midpoint
    plateau = bl.expected_aoii(bl.steady_state_belief(P1, 15))
    monkeypatch.setattr(policy_mod, "measured_rate", lambda pol, *a: 1 - pol.tau / plateau)
    br = calibrate_threshold(P1, MAP, 0.5)
    assert br.tau_minus == br.tau_plus == plateau / 2
    assert br.rate_minus == br.rate_plus == 0.5


def test_calibrate_threshold_infeasible_budget():
    with pytest.raises(BracketFailure):
        calibrate_threshold(SWINGING, MAP, 0.05, T=5000, seeds=[0])


def test_calibrate_threshold_rejects_boundary_alpha():
    with pytest.raises(ValueError):
        calibrate_threshold(P1, MAP, 1.0)


# lambda calibration

FAKE_RATES = {0: 1.0, 1: 0.6, 2: 0.4, 3.5: 0.25, 5: 0.1, 10: 0.02, 20: 0.0}


def test_calibrate_lambda_grid_example():
    br = calibrate_lambda(lambda lam: lam, 0.3, [0, 1, 2, 5, 10, 20], FAKE_RATES.get, refine=False)
    assert (br.policy_minus, br.policy_plus) == (5, 2)
    assert (br.lambda_minus, br.lambda_plus) == (5, 2)
    assert br.raw_rates[0] == max(br.raw_rates.values())


def test_calibrate_lambda_refines_at_midpoint():
    trained = []

    def trainer(lam):
        trained.append(lam)
        return lam

    br = calibrate_lambda(trainer, 0.3, [0, 1, 2, 5, 10, 20], FAKE_RATES.get)
    assert trained == [0, 1, 2, 5, 10, 20, 3.5]
    assert (br.lambda_minus, br.lambda_plus) == (3.5, 2)


def test_calibrate_lambda_smooths_noise():
    rates = {0: 1.0, 1: 0.3, 2: 0.35, 5: 0.0}
    br = calibrate_lambda(lambda lam: lam, 0.2, [0, 1, 2, 5], rates.get, refine=False)
    assert (br.lambda_minus, br.lambda_plus) == (5, 2)
    assert br.smoothed_rates[1] == br.smoothed_rates[2] == pytest.approx(0.325)


def test_calibrate_lambda_cache_shared():
    cache = {}
    calibrate_lambda(lambda lam: lam, 0.3, [0, 1, 2, 5], FAKE_RATES.get, refine=False, cache=cache)
    calibrate_lambda(lambda lam: pytest.fail("retrained"), 0.5, [0, 1, 2, 5], FAKE_RATES.get,
                     refine=False, cache=cache)


def test_calibrate_lambda_failures():
    with pytest.raises(BracketFailure):
        calibrate_lambda(lambda lam: lam, 0.7, [2, 5, 10], FAKE_RATES.get)
    with pytest.raises(ValueError):
        calibrate_lambda(lambda lam: lam, 0.3, [5, 2], FAKE_RATES.get)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30))
def test_isotonic_is_nonincreasing_and_mean_preserving(values):
    out = isotonic_nonincreasing(values)
    assert np.all(np.diff(out) <= 1e-12)
    assert out.sum() == pytest.approx(sum(values), abs=1e-9)
