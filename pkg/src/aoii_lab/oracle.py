"""Exact joint state-age distributions by enumerating source trajectories.

Correctness infrastructure for small instances: every trajectory of the
source is listed with its probability, observation histories are read off
the action sequence, estimates come from the exact conditional state
distribution of each history, and the age is tracked per trajectory. Nothing
here calls the belief recursion it is used to check.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import belief as bl
from .belief import Estimator
from .chain import TransitionMatrix

MAX_HORIZON = 12
MAX_STATES = 4


class HorizonTooLarge(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class HistoryBelief:
    """Exact belief at slot ``len(history)`` given the observation ``history``."""

    history: tuple
    probability: float
    belief: np.ndarray


def _decode(key: int, t: int, base: int) -> tuple:
    digits = []
    for _ in range(t):
        key, d = divmod(key, base)
        digits.append(d)
    return tuple(None if d == 0 else d for d in reversed(digits))


def enumerate_beliefs(p: TransitionMatrix, start: int, actions: Sequence[int], est: Estimator,
                      delta_max: Optional[int] = 15) -> dict[tuple, HistoryBelief]:
    """Exact beliefs for every realizable observation history up to ``len(actions)``.

    ``actions[t - 1]`` is the action at slot ``t``; a pull at slot ``t``
    delivers the state of slot ``t`` at slot ``t + 1``. The source starts
    in the known state ``start`` at slot 0. With ``delta_max=None`` ages are
    not capped and the belief has ``h + 1`` age columns.

    Returns a dict keyed by observation history (a tuple of ``None`` or
    delivered state, one entry per slot), including the empty history.
    """
    h = len(actions)
    n = p.n
    if h > MAX_HORIZON:
        raise HorizonTooLarge(f"horizon {h} exceeds {MAX_HORIZON}")
    if n > MAX_STATES:
        raise HorizonTooLarge(f"{n} states exceed {MAX_STATES}")
    width = (h + 1) if delta_max is None else delta_max + 1
    cap = width - 1
    P = p.rows

    # every trajectory X_1..X_h, as 0-based states
    traj = np.indices((n,) * h).reshape(h, -1).T if h else np.zeros((1, 0), dtype=int)
    x0 = start - 1
    prob = np.ones(len(traj))
    prev = np.full(len(traj), x0)
    for t in range(h):
        prob *= P[prev, traj[:, t]]
        prev = traj[:, t]

    out = {(): HistoryBelief((), 1.0, bl.point_mass(n, width - 1, start))}
    base = n + 1
    key = np.zeros(len(traj), dtype=np.int64)
    age = np.zeros(len(traj), dtype=np.int64)
    last = np.full(len(traj), start, dtype=np.int64)
    prev = np.full(len(traj), x0)
    for t in range(1, h + 1):
        pulled = t >= 2 and actions[t - 2]
        obs = prev + 1 if pulled else np.zeros(len(traj), dtype=np.int64)
        key = key * base + obs
        if pulled:
            last = obs
        x = traj[:, t - 1]
        uniq, inv = np.unique(key, return_inverse=True)
        g = len(uniq)
        p_hist = np.bincount(inv, prob, minlength=g)
        joint = np.bincount(inv * n + x, prob, minlength=g * n).reshape(g, n)
        with np.errstate(invalid="ignore", divide="ignore"):
            pi = joint / p_hist[:, None]
        if est.is_map:
            x_hat_g = np.argmax(pi, axis=1)
        else:
            x_hat_g = np.zeros(g, dtype=np.int64)
            x_hat_g[inv] = last - 1
        x_hat = x_hat_g[inv]
        age = np.where(x == x_hat, 0, np.minimum(age + 1, cap))
        mass = np.bincount((inv * n + x) * width + age, prob, minlength=g * n * width).reshape(g, n, width)
        for j in range(g):
            if p_hist[j] <= 0:
                continue
            hist = _decode(int(uniq[j]), t, base)
            out[hist] = HistoryBelief(hist, float(p_hist[j]), mass[j] / p_hist[j])
        prev = x
    return out


def enumerate_trajectories(p: TransitionMatrix, start: int, h: int):
    """All length-``h`` continuations of ``start`` with their probabilities.

    Returns a list of ``(states, probability)`` with ``states`` the 1-based
    sequence ``X_0 .. X_h``.
    """
    if h > MAX_HORIZON:
        raise HorizonTooLarge(f"horizon {h} exceeds {MAX_HORIZON}")
    rows = []
    traj = np.indices((p.n,) * h).reshape(h, -1).T if h else np.zeros((1, 0), dtype=int)
    for seq in traj:
        pr = 1.0
        cur = start - 1
        for s in seq:
            pr *= p.rows[cur, s]
            cur = s
        rows.append(((start, *(int(s) + 1 for s in seq)), pr))
    return rows


def recursive_beliefs(p: TransitionMatrix, start: int, histories, est: Estimator,
                      delta_max: int = 15) -> dict[tuple, np.ndarray]:
    """Run the belief recursion along each observation history (prefixes shared)."""
    if not est.is_map and est.last_received is None:
        est = bl.martingale(start)
    memo = {(): (bl.point_mass(p.n, delta_max, start), est)}

    def walk(hist):
        if hist in memo:
            return memo[hist]
        b, e = walk(hist[:-1])
        nb, _, ne = bl.advance(b, hist[-1], p, e)
        memo[hist] = (nb, ne)
        return memo[hist]

    return {hist: walk(tuple(hist))[0] for hist in histories}


def compare(exact, recursive) -> float:
    """Largest absolute entry difference between two belief collections.

    Accepts two mappings with identical keys, or two equal-length sequences.
    Mapping values may be arrays or :class:`HistoryBelief`.
    """
    if isinstance(exact, Mapping) != isinstance(recursive, Mapping):
        raise ShapeMismatch("cannot compare a mapping with a sequence")
    if isinstance(exact, Mapping):
        if set(exact) != set(recursive):
            raise ShapeMismatch("observation histories differ")
        pairs = [(exact[k], recursive[k]) for k in exact]
    else:
        if len(exact) != len(recursive):
            raise ShapeMismatch(f"sequence lengths differ: {len(exact)} vs {len(recursive)}")
        pairs = list(zip(exact, recursive))
    worst = 0.0
    for a, b in pairs:
        a = a.belief if isinstance(a, HistoryBelief) else np.asarray(a)
        b = b.belief if isinstance(b, HistoryBelief) else np.asarray(b)
        if a.shape != b.shape:
            raise ShapeMismatch(f"belief shapes differ: {a.shape} vs {b.shape}")
        worst = max(worst, float(np.max(np.abs(a - b))) if a.size else 0.0)
    return worst


def branch_probabilities(exact: dict[tuple, HistoryBelief]) -> dict[tuple, float]:
    """P(o_t | H_{t-1}) for every history ending in a delivered observation."""
    return {hist: hb.probability / exact[hist[:-1]].probability
            for hist, hb in exact.items() if hist and hist[-1] is not None}


def certify(p: TransitionMatrix, start: int, actions: Sequence[int], est: Estimator,
            delta_max: int = 15) -> float:
    """Max deviation between the recursion and enumeration over all branches of one action sequence."""
    exact = enumerate_beliefs(p, start, actions, est, delta_max)
    rec = recursive_beliefs(p, start, exact.keys(), est, delta_max)
    return compare(exact, rec)
