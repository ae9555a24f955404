"""Joint age-state belief of a remote monitor.

A belief is a plain ``(N, delta_max + 1)`` float array whose entry
``[i - 1, d]`` is the probability that the source sits in state ``i`` while
the age of incorrect information equals ``d``. The last age column saturates.

The age convention matches the recursion below: the age at slot ``t`` is zero
exactly when the estimate at ``t`` equals the source state at ``t``, and grows
by one for every consecutive mismatched slot otherwise.

Observations are ``None`` (nothing arrived) or a delivered 1-based state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numba import njit

from .chain import NoConvergence, TransitionMatrix, stationary

FLUSH = 1e-15
MASS_TOL = 1e-9

EMPTY = None
Observation = Optional[int]

STATIONARY = "stationary"


class MartingaleUninitialized(RuntimeError):
    pass


class ImpossibleObservation(ValueError):
    pass


@dataclass(frozen=True)
class Estimator:
    """Estimation rule used by the monitor.

    ``kind`` is ``"map"`` (most likely state of the marginal) or
    ``"martingale"`` (the most recently delivered state).
    """

    kind: str = "map"
    last_received: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("map", "martingale"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    @property
    def is_map(self) -> bool:
        return self.kind == "map"

    def received(self, o: Observation) -> "Estimator":
        if o is None or self.is_map:
            return self
        return replace(self, last_received=o)


MAP = Estimator("map")


def martingale(last_received: Optional[int] = None) -> Estimator:
    return Estimator("martingale", last_received)


def point_mass(n: int, delta_max: int, state: int) -> np.ndarray:
    b = np.zeros((n, delta_max + 1))
    b[state - 1, 0] = 1.0
    return b


def init_belief(p: TransitionMatrix, delta_max: int, start, est: Estimator = MAP) -> np.ndarray:
    """Initial belief: a point mass at a known state, or the no-observation steady state.

    With ``start="stationary"`` the stationary distribution is seeded into
    the belief (estimated state at age 0, every other state at age 1) and
    propagated until the total-variation change drops below 1e-12.
    """
    if delta_max < 1:
        raise ValueError("delta_max must be at least 1")
    if start != STATIONARY:
        if not 1 <= start <= p.n:
            raise ValueError(f"start state {start} outside 1..{p.n}")
        return point_mass(p.n, delta_max, start)
    b = _stationary_seed(p, delta_max, est)
    for _ in range(10**5):
        nxt, _ = propagate(b, p, est)
        change = 0.5 * np.abs(nxt - b).sum()
        b = nxt
        if change < 1e-12:
            return b
    raise NoConvergence("stationary burn-in did not settle")


def _stationary_seed(p: TransitionMatrix, delta_max: int, est: Estimator) -> np.ndarray:
    pi = stationary(p)
    x = estimate_from_pi(pi, est) - 1
    b = np.zeros((p.n, delta_max + 1))
    b[:, 1] = pi
    b[x, 1] = 0.0
    b[x, 0] = pi[x]
    return b


def marginal_pi(b: np.ndarray) -> np.ndarray:
    return b.sum(axis=1)


def estimate_from_pi(pi: np.ndarray, est: Estimator) -> int:
    if est.is_map:
        # np.argmax returns the first maximum, i.e. the smallest state index
        return int(np.argmax(pi)) + 1
    if est.last_received is None:
        raise MartingaleUninitialized("martingale estimator has not received a sample yet")
    return est.last_received


def estimate(b: np.ndarray, est: Estimator) -> int:
    return estimate_from_pi(marginal_pi(b), est)


def observe(b: np.ndarray, o: Observation) -> np.ndarray:
    """Condition the belief on a delivered sample of the current slot's state.

    Delivered state ``i`` keeps row ``i`` and divides it by the row's total
    mass, the marginal probability of ``i``. (Dividing by the per-age column
    sum instead would leave the result unnormalized.)
    """
    if o is None:
        return b
    row = b[o - 1]
    mass = row.sum()
    if mass <= FLUSH:
        raise ImpossibleObservation(f"state {o} has belief mass {mass:.3g}")
    out = np.zeros_like(b)
    out[o - 1] = row / mass
    return out


def propagate(b_hat: np.ndarray, p: TransitionMatrix, est: Estimator) -> tuple[np.ndarray, int]:
    """Advance the (updated) belief by one slot of source dynamics.

    Returns the new belief together with the new estimate. The estimated
    state receives all of its predicted mass at age 0; every other state
    inherits the age distribution shifted by one, the last age column
    absorbing whatever would overflow it. Entries below 1e-15 are flushed
    and the result renormalized.
    """
    if est.is_map:
        fixed = -1
    elif est.last_received is None:
        raise MartingaleUninitialized("martingale estimator has not received a sample yet")
    else:
        fixed = est.last_received - 1
    out, x = _propagate_kernel(b_hat, p.rows, fixed)
    return out, x + 1


@njit(cache=True)
def _propagate_kernel(b_hat, P, fixed):
    n, width = b_hat.shape
    row_mass = np.zeros(n)
    for m in range(n):
        for d in range(width):
            row_mass[m] += b_hat[m, d]
    pi_next = np.zeros(n)
    for i in range(n):
        for m in range(n):
            pi_next[i] += row_mass[m] * P[m, i]
    x = fixed
    if x < 0:
        x = 0
        for i in range(1, n):
            if pi_next[i] > pi_next[x]:
                x = i
    out = np.zeros((n, width))
    out[x, 0] = pi_next[x]
    for i in range(n):
        if i == x:
            continue
        for d in range(width):
            s = 0.0
            for m in range(n):
                s += b_hat[m, d] * P[m, i]
            out[i, min(d + 1, width - 1)] += s
    total = 0.0
    for i in range(n):
        for d in range(width):
            if out[i, d] < FLUSH:
                out[i, d] = 0.0
            total += out[i, d]
    for i in range(n):
        for d in range(width):
            out[i, d] /= total
    return out, x


def advance(b: np.ndarray, o: Observation, p: TransitionMatrix, est: Estimator) -> tuple[np.ndarray, int, Estimator]:
    """One monitor slot: absorb ``o``, then propagate. Also returns the updated estimator."""
    est = est.received(o)
    b_next, x = propagate(observe(b, o), p, est)
    return b_next, x, est


def expected_aoii(b: np.ndarray) -> float:
    return _expected_aoii(b)


@njit(cache=True)
def _expected_aoii(b):
    total = 0.0
    for i in range(b.shape[0]):
        for d in range(1, b.shape[1]):
            total += d * b[i, d]
    return total


def reward(b: np.ndarray, a: int, lam: float) -> float:
    return expected_aoii(b) + a * lam


def successor_distribution(b: np.ndarray, a: int, p: TransitionMatrix, est: Estimator):
    """All beliefs reachable in one slot after taking action ``a`` at belief ``b``.

    Returns a list of ``(observation, probability, belief, estimator)``
    tuples. Without a pull there is a single empty-observation branch; with a
    pull there is one branch per state of positive marginal mass.
    """
    if a == 0:
        nb, _ = propagate(b, p, est)
        return [(None, 1.0, nb, est)]
    pi = marginal_pi(b)
    branches = []
    for k in range(1, p.n + 1):
        if pi[k - 1] > FLUSH:
            nb, _, ne = advance(b, k, p, est)
            branches.append((k, float(pi[k - 1]), nb, ne))
    return branches


def steady_state_belief(p: TransitionMatrix, delta_max: int, est: Estimator = MAP,
                        tol: float = 1e-12, max_iter: int = 10**5) -> np.ndarray:
    """Fixed point of the belief recursion when nothing is ever observed."""
    b = _stationary_seed(p, delta_max, est)
    for _ in range(max_iter):
        nxt, _ = propagate(b, p, est)
        if np.max(np.abs(nxt - b)) < tol:
            return nxt
        b = nxt
    raise NoConvergence(f"no-observation belief did not settle in {max_iter} slots")


def is_valid(b: np.ndarray, tol: float = MASS_TOL) -> bool:
    return bool(np.all(b >= 0) and np.all(b <= 1 + tol) and abs(b.sum() - 1.0) <= tol)


def belief_rows(b: np.ndarray):
    """Yield ``(state, delta, mass)`` for every entry of the belief."""
    n, width = b.shape
    for i in range(n):
        for d in range(width):
            yield i + 1, d, float(b[i, d])


def write_belief_csv(path, b: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state", "delta", "mass"])
        for row in belief_rows(b):
            w.writerow([row[0], row[1], repr(row[2])])
