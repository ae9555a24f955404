"""Pull policies, the steering mixture, and budget calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import sim
from .belief import Estimator, expected_aoii, steady_state_belief
from .chain import TransitionMatrix

log = logging.getLogger(__name__)


class BracketFailure(RuntimeError):
    pass


@dataclass
class SteeringState:
    pulls_so_far: int = 0
    slots_so_far: int = 0

    @property
    def running_rate(self) -> float:
        return self.pulls_so_far / self.slots_so_far if self.slots_so_far else 0.0

    def record(self, a: int) -> None:
        self.pulls_so_far += a
        self.slots_so_far += 1


class NeverPull:
    name = "never"

    def decide(self, b, t, steering=None, rng=None) -> int:
        return 0


class AlwaysPull:
    name = "always"

    def decide(self, b, t, steering=None, rng=None) -> int:
        return 1


@dataclass(frozen=True)
class RandomPolicy:
    alpha: float
    name = "random"

    def __post_init__(self):
        _check_alpha(self.alpha)

    def decide(self, b, t, steering=None, rng=None) -> int:
        return int(rng.random() < self.alpha)


@dataclass(frozen=True)
class UniformPolicy:
    """Pulls at slots ``round(m / alpha)``, ``m = 1, 2, ...``, rounding halves up.

    ``alpha`` is turned into an exact fraction so the schedule has no
    floating-point ambiguity at half-integers.
    """

    alpha: float
    name = "uniform"
    _num: int = field(init=False, repr=False)
    _den: int = field(init=False, repr=False)

    def __post_init__(self):
        _check_alpha(self.alpha)
        frac = Fraction(self.alpha).limit_denominator(10**9)
        object.__setattr__(self, "_num", frac.numerator)
        object.__setattr__(self, "_den", frac.denominator)

    def pull_slot(self, m: int) -> int:
        # floor(m/alpha + 1/2) in integer arithmetic
        return (2 * m * self._den + self._num) // (2 * self._num)

    def decide(self, b, t, steering=None, rng=None) -> int:
        if self._num == 0:
            return 0
        guess = t * self._num // self._den
        for m in range(max(guess - 1, 1), guess + 3):
            if self.pull_slot(m) == t:
                return 1
        return 0


@dataclass(frozen=True)
class ThresholdPolicy:
    """Pull whenever the expected age of incorrect information reaches ``tau``."""

    tau: float
    name = "threshold"

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    def decide(self, b, t, steering=None, rng=None) -> int:
        return int(expected_aoii(b) >= self.tau)


@dataclass(frozen=True)
class SteeredPolicy:
    """Deterministic past-dependent switch between two policies.

    While the running pull rate is strictly below ``alpha`` the higher-rate
    policy ``plus`` acts, otherwise ``minus`` does.
    """

    minus: object
    plus: object
    alpha: float
    name = "steered"

    def new_steering(self) -> SteeringState:
        return SteeringState()

    def decide(self, b, t, steering: SteeringState, rng=None) -> int:
        inner = self.plus if steering.running_rate < self.alpha else self.minus
        a = inner.decide(b, t, None, rng)
        steering.record(a)
        return a


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def decide(policy, b, t, steering=None, rng=None) -> int:
    return policy.decide(b, t, steering, rng)


def measured_rate(policy, p, est, T, seeds, delta_max) -> float:
    return float(np.mean([sim.run(policy, p, est, T, s, delta_max).metrics.rate for s in seeds]))


@dataclass
class ThresholdBracket:
    tau_minus: float
    tau_plus: float
    rate_minus: float
    rate_plus: float
    rates: dict = field(default_factory=dict)
    iterations: int = 0

    def policies(self):
        return ThresholdPolicy(self.tau_minus), ThresholdPolicy(self.tau_plus)


def calibrate_threshold(p: TransitionMatrix, est: Estimator, alpha: float, delta_max: int = 15,
                        T: int = 20_000, seeds: Sequence[int] = (0, 1, 2),
                        width_tol: float = 1e-3, rate_tol: float = 1e-3) -> ThresholdBracket:
    """Bisection on the threshold for a pair of policies whose rates bracket ``alpha``.

    The measured rate is nonincreasing in the threshold. The search runs on
    ``[0, plateau]``, the plateau being the expected age of the no-pull
    steady-state belief, and stops once the thresholds are within
    ``width_tol`` or both bracket rates are within ``rate_tol`` of ``alpha``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie strictly between 0 and 1")
    rates = {}

    def rate(tau):
        if tau not in rates:
            rates[tau] = measured_rate(ThresholdPolicy(tau), p, est, T, seeds, delta_max)
        return rates[tau]

    lo = 0.0
    hi = expected_aoii(steady_state_belief(p, delta_max, _steady_est(est)))
    r_lo, r_hi = rate(lo), rate(hi)
    if not r_hi <= alpha <= r_lo:
        raise BracketFailure(f"alpha={alpha} outside achievable threshold rates [{r_hi:.4g}, {r_lo:.4g}]")
    it = 0
    while hi - lo >= width_tol and not (r_lo - alpha <= rate_tol and alpha - r_hi <= rate_tol):
        it += 1
        mid = 0.5 * (lo + hi)
        r_mid = rate(mid)
        if r_mid == alpha:
            return ThresholdBracket(mid, mid, r_mid, r_mid, rates, it)
        if r_mid > alpha:
            lo, r_lo = mid, r_mid
        else:
            hi, r_hi = mid, r_mid
    return ThresholdBracket(hi, lo, r_hi, r_lo, rates, it)


def _steady_est(est: Estimator) -> Estimator:
    # runs start from state 1, which seeds the martingale estimate
    if not est.is_map and est.last_received is None:
        return Estimator("martingale", 1)
    return est


def isotonic_nonincreasing(values: Sequence[float]) -> np.ndarray:
    from sklearn.isotonic import IsotonicRegression

    x = np.arange(len(values))
    return IsotonicRegression(increasing=False).fit_transform(x, np.asarray(values, float))


@dataclass
class LambdaBracket:
    lambda_minus: float
    lambda_plus: float
    policy_minus: object
    policy_plus: object
    raw_rates: dict
    smoothed_rates: dict


def calibrate_lambda(trainer: Callable[[float], object], alpha: float, lambda_grid: Sequence[float],
                     rate_of: Callable[[object], float], refine: bool = True,
                     cache: Optional[dict] = None) -> LambdaBracket:
    """Pick the adjacent pair of Lagrange multipliers whose trained policies bracket ``alpha``.

    ``trainer(lam)`` returns a policy and ``rate_of(policy)`` its simulated
    pull rate. Rates are smoothed to be nonincreasing in the multiplier
    before bracketing. With ``refine`` one extra multiplier is trained at the
    midpoint of the first bracket. ``cache`` maps multiplier to
    ``(policy, rate)`` and lets several budgets share trainings.
    """
    grid = list(lambda_grid)
    if grid != sorted(grid):
        raise ValueError("lambda_grid must be sorted ascending")
    cache = {} if cache is None else cache

    def ensure(lam):
        if lam not in cache:
            pol = trainer(lam)
            cache[lam] = (pol, rate_of(pol))
            log.info("lambda=%g rate=%.4f", lam, cache[lam][1])
        return cache[lam]

    def bracket(lams):
        raw = [ensure(lam)[1] for lam in lams]
        smooth = isotonic_nonincreasing(raw)
        for i in range(len(lams) - 1):
            if smooth[i] >= alpha >= smooth[i + 1]:
                return i, raw, smooth
        raise BracketFailure(f"alpha={alpha} outside trained rates [{smooth[-1]:.4g}, {smooth[0]:.4g}]")

    lams = grid
    i, raw, smooth = bracket(lams)
    if refine:
        mid = 0.5 * (lams[i] + lams[i + 1])
        lams = sorted(set(lams) | {mid})
        i, raw, smooth = bracket(lams)
    lo, hi = lams[i], lams[i + 1]
    return LambdaBracket(
        lambda_minus=hi, lambda_plus=lo,
        policy_minus=cache[hi][0], policy_plus=cache[lo][0],
        raw_rates=dict(zip(lams, raw)), smoothed_rates=dict(zip(lams, map(float, smooth))),
    )


def steering_run(phi_minus, phi_plus, alpha: float, p: TransitionMatrix, est: Estimator,
                 T: int, seed, delta_max: int = 15, **kw) -> sim.RunResult:
    return sim.run(SteeredPolicy(phi_minus, phi_plus, alpha), p, est, T, seed, delta_max, **kw)
