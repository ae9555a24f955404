"""Feed-forward action-value approximation over beliefs.

The network maps a flattened belief (state-major) to the cost of not
pulling and of pulling. Training targets are model-based: the continuation
term is the exact expectation over the belief's successors, computed from
the belief recursion, with successor values read from a frozen target copy.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import belief as bl
from . import sim
from .belief import Estimator
from .chain import TransitionMatrix
from .policy import AlwaysPull, NeverPull

log = logging.getLogger(__name__)

HIDDEN = (60, 60)


class NonFiniteLoss(FloatingPointError):
    pass


class AllRestartsDiverged(RuntimeError):
    pass


class ValueNetwork:
    """Fully connected rectifier network, ``x @ W + b`` per layer, identity output."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        self.weights = [np.asarray(w, float) for w in weights]
        self.biases = [np.asarray(b, float) for b in biases]

    @classmethod
    def initialize(cls, sizes: Sequence[int], rng: np.random.Generator) -> "ValueNetwork":
        """Zero biases, weights uniform in +-sqrt(6 / (fan_in + fan_out))."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "ValueNetwork":
        return ValueNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 1:
            last = len(self.weights) - 1
            for k, (w, b) in enumerate(zip(self.weights, self.biases)):
                x = _dense(x, w, b, k < last)
            return x
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_cached(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out: np.ndarray):
        """Gradients of ``grad_out . output`` for a single input vector.

        Returns ``[dW1, db1, dW2, db2, ...]`` aligned with :meth:`params`.
        """
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            grads[2 * k] = np.outer(acts[k], g)
            grads[2 * k + 1] = g
            if k:
                g = (self.weights[k] @ g) * (acts[k] > 0)
        return grads

    def to_text(self) -> str:
        lines = [" ".join(map(str, self.sizes))]
        for p in self.params():
            lines.append(" ".join(repr(float(v)) for v in p.ravel()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ValueNetwork":
        lines = text.strip().splitlines()
        sizes = [int(s) for s in lines[0].split()]
        weights, biases = [], []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = np.array(lines[1 + 2 * k].split(), dtype=float).reshape(fan_in, fan_out)
            b = np.array(lines[2 + 2 * k].split(), dtype=float).reshape(fan_out)
            weights.append(w)
            biases.append(b)
        return cls(weights, biases)


def network_sizes(n_states: int, delta_max: int) -> list[int]:
    return [n_states * (delta_max + 1), *HIDDEN, 2]


def forward(net: ValueNetwork, b: np.ndarray) -> tuple[float, float]:
    q = net(b.ravel())
    return float(q[0]), float(q[1])


@dataclass
class TrainConfig:
    lam: float = 0.0
    gamma: float = 0.95
    learning_rate: float = 1e-3
    sync_every: int = 50
    e_max: int = 50
    nu: float = 0.9
    delta_explore: float = 0.05
    epoch_length: int = 2000
    delta_max: int = 15
    optimizer: str = "adam"
    # Costs are multiplied by this before fitting; None picks (1 - gamma) / (1 + lam).
    cost_scale: Optional[float] = None
    converge_tol: float = 1e-4
    converge_patience: int = 5
    start: int = 1

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.nu <= 1:
            raise ValueError("nu must lie in (0, 1]")
        if not 0 <= self.delta_explore < 1:
            raise ValueError("delta_explore must lie in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def scale(self) -> float:
        if self.cost_scale is not None:
            return self.cost_scale
        return (1.0 - self.gamma) / (1.0 + self.lam)

    def exploration(self, epoch: int) -> float:
        return self.delta_explore * self.nu ** (epoch - 1)


def default_delta_explore(n_states: int) -> float:
    return 0.25 if n_states >= 3 else 0.05


class Adam:
    """Adaptive-moment optimizer state for :func:`train_step`."""

    def __init__(self, net: ValueNetwork, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.mW = [np.zeros_like(w) for w in net.weights]
        self.vW = [np.zeros_like(w) for w in net.weights]
        self.mb = [np.zeros_like(b) for b in net.biases]
        self.vb = [np.zeros_like(b) for b in net.biases]
        self.t = 0

    def begin(self):
        self.t += 1

    def layer(self, k, W, b, act, g):
        _adam_layer(W, b, act, g, self.mW[k], self.vW[k], self.mb[k], self.vb[k], self.lr,
                    self.beta1, self.beta2, 1 - self.beta1 ** self.t, 1 - self.beta2 ** self.t, self.eps)


def _target_from_branches(net_target: ValueNetwork, b, a, branches, cfg: TrainConfig) -> float:
    cont = 0.0
    for _, prob, nb, _ in branches:
        q = net_target(nb.ravel())
        cont += prob * min(q[0], q[1])
    return cfg.scale * bl.reward(b, a, cfg.lam) + cfg.gamma * cont


def td_target(net_target: ValueNetwork, b: np.ndarray, a: int, p: TransitionMatrix,
              est: Estimator, cfg: TrainConfig) -> float:
    """Scaled one-step cost plus the discounted exact expectation of the
    successors' minimum target-network value."""
    return _target_from_branches(net_target, b, a, bl.successor_distribution(b, a, p, est), cfg)


def _fit(net: ValueNetwork, x: np.ndarray, a: int, target: float, cfg: TrainConfig, optimizer=None) -> float:
    """Single-sample squared-error update of output ``a`` towards ``target``.

    Layers are updated from the top down with fused kernels; each layer's
    backpropagated signal is computed before that layer's weights change,
    so the step equals a plain gradient step on the pre-update parameters.
    """
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for k, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = _dense(h, w, b, k < last)
        acts.append(h)
    err = h[a] - target
    loss = float(err * err)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss {loss}")
    if err == 0.0:
        return loss
    g = np.zeros(h.shape[0])
    g[a] = 2.0 * err
    if optimizer is not None:
        optimizer.begin()
    for k in range(last, -1, -1):
        w, b = net.weights[k], net.biases[k]
        g_below = _backprop(w, g, acts[k]) if k else None
        if optimizer is None:
            _sgd_layer(w, b, acts[k], g, cfg.learning_rate)
        else:
            optimizer.layer(k, w, b, acts[k], g)
        g = g_below
    return loss


@njit(cache=True)
def _dense(x, W, b, relu):
    n_in, n_out = W.shape
    out = b.copy()
    for i in range(n_in):
        xi = x[i]
        if xi != 0.0:
            for j in range(n_out):
                out[j] += xi * W[i, j]
    if relu:
        for j in range(n_out):
            if out[j] < 0.0:
                out[j] = 0.0
    return out


@njit(cache=True)
def _backprop(W, g, act):
    n_in, n_out = W.shape
    out = np.zeros(n_in)
    for i in range(n_in):
        if act[i] > 0.0:
            s = 0.0
            for j in range(n_out):
                s += W[i, j] * g[j]
            out[i] = s
    return out


@njit(cache=True)
def _sgd_layer(W, b, act, g, lr):
    n_in, n_out = W.shape
    for i in range(n_in):
        ai = act[i]
        if ai != 0.0:
            for j in range(n_out):
                W[i, j] -= lr * ai * g[j]
    for j in range(n_out):
        b[j] -= lr * g[j]


@njit(cache=True)
def _adam_layer(W, b, act, g, mW, vW, mb, vb, lr, beta1, beta2, c1, c2, eps):
    n_in, n_out = W.shape
    for i in range(n_in):
        ai = act[i]
        for j in range(n_out):
            gr = ai * g[j]
            m = beta1 * mW[i, j] + (1.0 - beta1) * gr
            v = beta2 * vW[i, j] + (1.0 - beta2) * gr * gr
            # moments of idle inputs decay geometrically; subnormals are very slow
            if abs(m) < 1e-150:
                m = 0.0
            if v < 1e-300:
                v = 0.0
            mW[i, j] = m
            vW[i, j] = v
            W[i, j] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    for j in range(n_out):
        gr = g[j]
        m = beta1 * mb[j] + (1.0 - beta1) * gr
        v = beta2 * vb[j] + (1.0 - beta2) * gr * gr
        mb[j] = m
        vb[j] = v
        b[j] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def train_step(net_main: ValueNetwork, net_target: ValueNetwork, b: np.ndarray, a: int,
               p: TransitionMatrix, est: Estimator, cfg: TrainConfig, optimizer=None) -> float:
    """One gradient update of ``net_main`` towards the TD target; returns the pre-update squared error."""
    target = td_target(net_target, b, a, p, est, cfg)
    return _fit(net_main, b.ravel(), a, target, cfg, optimizer)


def loss_gradients(net: ValueNetwork, b: np.ndarray, a: int, target: float) -> list[np.ndarray]:
    q, acts = net.forward_cached(b.ravel())
    g_out = np.zeros_like(q)
    g_out[a] = 2.0 * (q[a] - target)
    return net.backward(acts, g_out)


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    net: ValueNetwork
    lam: float = 0.0
    name = "dqn"

    def decide(self, b, t=None, steering=None, rng=None) -> int:
        q = self.net(b.ravel())
        return int(q[1] < q[0])


@dataclass
class EpochStats:
    epoch: int
    avg_loss: float
    eval_cost: float
    exploration_prob: float
    forced_fraction: float
    pull_fraction: float


@dataclass
class TrainingReport:
    lam: float
    seed: int
    epochs: list = field(default_factory=list)
    steps: int = 0
    converged: bool = False

    CSV_COLUMNS = ("epoch", "avg_loss", "eval_cost", "exploration_prob")

    def rows(self):
        for e in self.epochs:
            yield e.epoch, e.avg_loss, e.eval_cost, e.exploration_prob


def train(p: TransitionMatrix, est: Estimator, cfg: TrainConfig, seed) -> tuple[LearnedPolicy, TrainingReport]:
    """Train a value network along a simulated belief trajectory.

    In epoch ``e`` each slot forces action 0 or 1 with probability
    ``delta * nu**(e - 1) / 2`` each and acts greedily otherwise. Every
    visited ``(belief, action)`` gets one update; the next belief is drawn
    from the exact successor distribution of that pair.
    """
    rng = np.random.default_rng(seed)
    net = ValueNetwork.initialize(network_sizes(p.n, cfg.delta_max), rng)
    target = net.copy()
    optimizer = Adam(net, cfg.learning_rate) if cfg.optimizer == "adam" else None
    if not est.is_map and est.last_received is None:
        est = bl.martingale(cfg.start)
    b = bl.point_mass(p.n, cfg.delta_max, cfg.start)
    report = TrainingReport(lam=cfg.lam, seed=seed)
    prev_loss, calm = None, 0
    for epoch in range(1, cfg.e_max + 1):
        eps = cfg.exploration(epoch)
        loss_sum = cost_sum = 0.0
        forced = pulls = 0
        for _ in range(cfg.epoch_length):
            u = rng.random()
            x = b.ravel()
            if u < eps:
                forced += 1
                a = 0 if u < eps / 2 else 1
            else:
                q = net(x)
                a = int(q[1] < q[0])
            branches = bl.successor_distribution(b, a, p, est)
            tgt = _target_from_branches(target, b, a, branches, cfg)
            loss_sum += _fit(net, x, a, tgt, cfg, optimizer)
            cost_sum += bl.reward(b, a, cfg.lam)
            pulls += a
            report.steps += 1
            if report.steps % cfg.sync_every == 0:
                target = net.copy()
            if len(branches) == 1:
                _, _, b, est = branches[0]
            else:
                k = rng.choice(len(branches), p=np.array([br[1] for br in branches]))
                _, _, b, est = branches[k]
        n = cfg.epoch_length
        avg_loss = loss_sum / n
        report.epochs.append(EpochStats(epoch, avg_loss, cost_sum / n, eps, forced / n, pulls / n))
        if prev_loss is not None and abs(avg_loss - prev_loss) <= cfg.converge_tol * abs(prev_loss):
            calm += 1
            if calm >= cfg.converge_patience:
                report.converged = True
                break
        else:
            calm = 0
        prev_loss = avg_loss
    return LearnedPolicy(net, cfg.lam), report


@dataclass
class Candidate:
    seed: int
    policy: Optional[LearnedPolicy]
    report: Optional[TrainingReport]
    cost: float
    rate: float
    within_envelope: bool
    error: Optional[str] = None


@dataclass
class BestResult:
    policy: LearnedPolicy
    cost: float
    rate: float
    candidates: list
    envelope_cost: float


def evaluate_cost(policy, p, est, lam, T, seed, delta_max) -> tuple[float, float]:
    m = sim.run(policy, p, est, T, seed, delta_max).metrics
    return m.cost(lam), m.rate


def train_best(p: TransitionMatrix, est: Estimator, cfg: TrainConfig, restarts: int = 3,
               seeds: Optional[Sequence[int]] = None, eval_T: int = 20_000, eval_seed: int = 10**6) -> BestResult:
    """Repeat training and keep the policy with the lowest simulated ``MAoII + lambda * R``.

    A restart whose cost exceeds the better of never/always pulling by more
    than 5% is rejected, unless every restart is.
    """
    if restarts < 1:
        raise ValueError("restarts must be at least 1")
    seeds = list(seeds) if seeds is not None else list(range(restarts))
    seeds = seeds[:restarts]
    floor = min(evaluate_cost(pol, p, est, cfg.lam, eval_T, eval_seed, cfg.delta_max)[0]
                for pol in (NeverPull(), AlwaysPull()))
    envelope = floor * 1.05 + 1e-12
    cands = []
    for s in seeds:
        try:
            pol, rep = train(p, est, cfg, s)
        except NonFiniteLoss as exc:
            log.warning("restart seed=%s diverged: %s", s, exc)
            cands.append(Candidate(s, None, None, float("inf"), float("nan"), False, str(exc)))
            continue
        cost, rate = evaluate_cost(pol, p, est, cfg.lam, eval_T, eval_seed, cfg.delta_max)
        cands.append(Candidate(s, pol, rep, cost, rate, cost <= envelope))
    live = [c for c in cands if c.policy is not None]
    if not live:
        raise AllRestartsDiverged(f"all {len(cands)} restarts diverged")
    pool = [c for c in live if c.within_envelope] or live
    if not any(c.within_envelope for c in live):
        log.warning("lambda=%g: no restart within 5%% of the never/always envelope", cfg.lam)
    best = min(pool, key=lambda c: c.cost)
    return BestResult(best.policy, best.cost, best.rate, cands, floor)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def with_lambda(cfg: TrainConfig, lam: float) -> TrainConfig:
    return replace(cfg, lam=lam)
