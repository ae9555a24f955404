"""Ground-truth world, one-slot pull channel and run metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from . import belief as bl
from .belief import Estimator
from .chain import TransitionMatrix, step


class SlotRecord(NamedTuple):
    t: int
    x: int
    x_hat: int
    aoii: int
    action: int
    expected_aoii: float
    observation: Optional[int] = None


TRACE_COLUMNS = ["t", "x", "x_hat", "aoii", "action", "expected_aoii"]


@dataclass
class WorldState:
    """Ground truth entering slot ``t``: the source state ``x`` at ``t``,
    the true (uncapped) age, and the sample in flight, if any."""

    t: int
    x: int
    aoii: int
    inflight: Optional[int]
    rng: np.random.Generator


@dataclass
class RunMetrics:
    sum_aoii: int = 0
    sum_actions: int = 0
    sum_expected_aoii: float = 0.0
    slots: int = 0

    def _check(self):
        if self.slots <= 0:
            raise ValueError("no slots accumulated")

    @property
    def maoii(self) -> float:
        self._check()
        return self.sum_aoii / self.slots

    @property
    def rate(self) -> float:
        self._check()
        return self.sum_actions / self.slots

    @property
    def maoii_hat(self) -> float:
        self._check()
        return self.sum_expected_aoii / self.slots

    def cost(self, lam: float) -> float:
        return self.maoii + lam * self.rate

    def add(self, rec: SlotRecord) -> None:
        self.sum_aoii += rec.aoii
        self.sum_actions += rec.action
        self.sum_expected_aoii += rec.expected_aoii
        self.slots += 1


@dataclass
class RunResult:
    metrics: RunMetrics
    trace: list = field(default_factory=list)


def make_rngs(seed) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent source and policy streams from one seed.

    Keeping the source stream separate means every policy run with the same
    seed sees the same source trajectory.
    """
    src, pol = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(src), np.random.default_rng(pol)


def init_world(p: TransitionMatrix, start: int, rng: np.random.Generator) -> WorldState:
    """World entering slot 1 from a known initial state ``start`` at slot 0."""
    return WorldState(t=1, x=step(p, start, rng), aoii=0, inflight=None, rng=rng)


def slot_step(world: WorldState, b: np.ndarray, est: Estimator,
              action: Union[int, Callable[[np.ndarray, int], int]], p: TransitionMatrix):
    """Run one slot. ``world`` is advanced in place.

    Order inside the slot: deliver the sample in flight, update and propagate
    the belief, take the action (an int, or a callable of the fresh belief
    and the slot index), update the true age, move the source.

    Returns ``(world, belief, estimator, record)``.
    """
    o = world.inflight
    if o is not None:
        world.inflight = None
    b, x_hat, est = bl.advance(b, o, p, est)
    a = action(b, world.t) if callable(action) else action
    if a:
        world.inflight = world.x
    rec = SlotRecord(world.t, world.x, x_hat, world.aoii, int(a), bl.expected_aoii(b), o)
    world.aoii = world.aoii + 1 if world.x != x_hat else 0
    world.x = step(p, world.x, world.rng)
    world.t += 1
    return world, b, est, rec


def run(policy, p: TransitionMatrix, est: Estimator, T: int, seed, delta_max: int = 15,
        start: int = 1, burn_in: int = 0, trace: bool = False) -> RunResult:
    """Simulate ``T`` slots under ``policy`` and accumulate metrics.

    The monitor starts knowing the initial state. ``burn_in`` slots at the
    start are simulated but left out of the metrics.
    """
    if T < 1:
        raise ValueError("T must be positive")
    src_rng, pol_rng = make_rngs(seed)
    world = init_world(p, start, src_rng)
    b = bl.point_mass(p.n, delta_max, start)
    if not est.is_map and est.last_received is None:
        est = bl.martingale(start)
    steering = policy.new_steering() if hasattr(policy, "new_steering") else None

    def act(belief, t):
        return policy.decide(belief, t, steering, pol_rng)

    metrics = RunMetrics()
    records = []
    for _ in range(burn_in + T):
        world, b, est, rec = slot_step(world, b, est, act, p)
        if rec.t > burn_in:
            metrics.add(rec)
            if trace:
                records.append(rec)
    return RunResult(metrics, records)


def write_trace_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in records:
            w.writerow([r.t, r.x, r.x_hat, r.aoii, r.action, repr(r.expected_aoii)])
