"""Experiment configuration, policy sweeps over sampling budgets, and belief traces."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import belief as bl
from . import dqn, sim
from .belief import Estimator
from .chain import NAMED, ChainError, TransitionMatrix, validate
from .policy import (AlwaysPull, BracketFailure, NeverPull, RandomPolicy, SteeredPolicy, UniformPolicy,
                     calibrate_lambda, calibrate_threshold, measured_rate)

log = logging.getLogger(__name__)

CSV_VERSION = "# aoii-lab v1"
RESULT_COLUMNS = ["policy", "estimator", "alpha", "seed", "maoii", "rate", "maoii_hat",
                  "param_minus", "param_plus", "rate_minus", "rate_plus", "status"]
AGGREGATE_COLUMNS = ["policy", "estimator", "alpha", "n", "maoii_mean", "maoii_se",
                     "rate_mean", "rate_se", "maoii_hat_mean"]
POLICIES = ("random", "uniform", "threshold", "dqn", "never", "always")
DEFAULT_LAMBDA_GRID = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)


class ConfigError(ValueError):
    pass


@dataclass
class ThresholdSettings:
    T: int = 20_000
    seeds: list = field(default_factory=lambda: [101, 102, 103])


@dataclass
class DqnSettings:
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    restarts: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval_T: int = 20_000
    rate_T: int = 20_000
    rate_seeds: list = field(default_factory=lambda: [201, 202, 203])
    refine: bool = True
    train: dict = field(default_factory=dict)


@dataclass
class TraceSettings:
    horizon: int = 10
    pull_slots: list = field(default_factory=lambda: [3])
    seed: int = 0


@dataclass
class ExperimentConfig:
    chain: TransitionMatrix
    policies: list
    alphas: list
    seeds: list
    estimators: list = field(default_factory=lambda: ["map"])
    delta_max: int = 15
    T: int = 100_000
    start: int = 1
    burn_in: int = 0
    workers: int = 1
    output_dir: str = "results"
    threshold: ThresholdSettings = field(default_factory=ThresholdSettings)
    dqn: DqnSettings = field(default_factory=DqnSettings)
    trace: TraceSettings = field(default_factory=TraceSettings)

    def train_config(self, est_kind: str, lam: float = 0.0) -> dqn.TrainConfig:
        base = dict(delta_max=self.delta_max, start=self.start,
                    delta_explore=dqn.default_delta_explore(self.chain.n), lam=lam)
        base.update(self.dqn.train)
        base["lam"] = lam
        try:
            return dqn.TrainConfig(**base)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"dqn.train: {exc}") from exc


def _sub(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return cls(**raw)


def parse_config(raw: dict) -> ExperimentConfig:
    """Build and validate an :class:`ExperimentConfig` from a decoded JSON document."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    chain = raw.pop("chain", None)
    if isinstance(chain, str):
        if chain not in NAMED:
            raise ConfigError(f"unknown named chain {chain!r}; known: {sorted(NAMED)}")
        matrix = NAMED[chain]
    elif isinstance(chain, list):
        try:
            matrix = validate(TransitionMatrix(chain))
        except ChainError as exc:
            raise ConfigError(f"chain: {exc}") from exc
    else:
        raise ConfigError("chain must be a matrix (list of rows) or a named chain")
    if "estimator" in raw:
        raw.setdefault("estimators", [raw.pop("estimator")])
    sub = {
        "threshold": _sub(ThresholdSettings, raw.pop("threshold", None), "threshold"),
        "dqn": _sub(DqnSettings, raw.pop("dqn", None), "dqn"),
        "trace": _sub(TraceSettings, raw.pop("trace", None), "trace"),
    }
    known = {f.name for f in fields(ExperimentConfig)} - {"chain"} - set(sub)
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    for key in ("policies", "alphas", "seeds"):
        if key not in raw:
            raise ConfigError(f"missing required key {key!r}")
    cfg = ExperimentConfig(chain=matrix, **raw, **sub)
    _check(cfg)
    return cfg


def _check(cfg: ExperimentConfig) -> None:
    if not cfg.policies:
        raise ConfigError("policy list is empty")
    bad = [p for p in cfg.policies if p not in POLICIES]
    if bad:
        raise ConfigError(f"unknown policies {bad}; known: {list(POLICIES)}")
    if not cfg.alphas:
        raise ConfigError("alpha grid is empty")
    if any(not isinstance(a, (int, float)) or not 0 <= a <= 1 for a in cfg.alphas):
        raise ConfigError("alphas must lie in [0, 1]")
    if not cfg.seeds:
        raise ConfigError("seed list is empty")
    if not cfg.estimators or any(e not in ("map", "martingale") for e in cfg.estimators):
        raise ConfigError("estimators must be a nonempty subset of ['map', 'martingale']")
    if cfg.delta_max < 1 or cfg.T < 1 or cfg.workers < 1:
        raise ConfigError("delta_max, T and workers must be positive")
    if not 1 <= cfg.start <= cfg.chain.n:
        raise ConfigError(f"start state must lie in 1..{cfg.chain.n}")
    if cfg.trace.horizon > 1000:
        raise ConfigError("trace horizon is capped at 1000 slots")
    if cfg.dqn.lambda_grid != sorted(cfg.dqn.lambda_grid):
        raise ConfigError("dqn.lambda_grid must be ascending")
    cfg.train_config("map")


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


def make_estimator(kind: str, start: int) -> Estimator:
    return bl.MAP if kind == "map" else bl.martingale(start)


@dataclass
class Cell:
    """One (policy, estimator, budget) combination and the policy that realizes it."""

    policy: str
    estimator: str
    alpha: float
    runner: object = None
    param_minus: float = math.nan
    param_plus: float = math.nan
    rate_minus: float = math.nan
    rate_plus: float = math.nan
    status: str = "ok"
    calibration: Optional[dict] = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class Sweep:
    def __init__(self, cfg: ExperimentConfig, out_dir: Optional[Path] = None, workers: Optional[int] = None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.workers = workers or cfg.workers
        self.lambda_cache: dict = {}
        self.training: dict = {}

    # calibration

    def _dqn_trainer(self, est_kind: str):
        cfg = self.cfg
        est = make_estimator(est_kind, cfg.start)

        def trainer(lam):
            tc = cfg.train_config(est_kind, lam)
            best = dqn.train_best(cfg.chain, est, tc, restarts=cfg.dqn.restarts, seeds=cfg.dqn.seeds,
                                  eval_T=cfg.dqn.eval_T)
            self.training[(est_kind, lam)] = best
            return best.policy

        def rate_of(policy):
            return measured_rate(policy, cfg.chain, est, cfg.dqn.rate_T, cfg.dqn.rate_seeds, cfg.delta_max)

        return trainer, rate_of

    def build_cell(self, policy: str, est_kind: str, alpha: float) -> Cell:
        cfg = self.cfg
        est = make_estimator(est_kind, cfg.start)
        cell = Cell(policy, est_kind, alpha)
        if policy == "random":
            cell.runner = RandomPolicy(alpha)
        elif policy == "uniform":
            cell.runner = UniformPolicy(alpha)
        elif policy == "never":
            cell.runner = NeverPull()
        elif policy == "always":
            cell.runner = AlwaysPull()
        elif policy == "threshold":
            try:
                br = calibrate_threshold(cfg.chain, est, alpha, cfg.delta_max, cfg.threshold.T, cfg.threshold.seeds)
            except BracketFailure as exc:
                return self._failed(cell, "threshold", exc)
            except ValueError as exc:
                return self._failed(cell, "threshold", exc)
            minus, plus = br.policies()
            cell.runner = SteeredPolicy(minus, plus, alpha)
            cell.param_minus, cell.param_plus = br.tau_minus, br.tau_plus
            cell.rate_minus, cell.rate_plus = br.rate_minus, br.rate_plus
            cell.calibration = {"kind": "threshold", "tau_minus": br.tau_minus, "tau_plus": br.tau_plus,
                                "rate_minus": br.rate_minus, "rate_plus": br.rate_plus,
                                "iterations": br.iterations,
                                "rates": [[tau, r] for tau, r in sorted(br.rates.items())]}
        elif policy == "dqn":
            trainer, rate_of = self._dqn_trainer(est_kind)
            cache = self.lambda_cache.setdefault(est_kind, {})
            try:
                br = calibrate_lambda(trainer, alpha, cfg.dqn.lambda_grid, rate_of, cfg.dqn.refine, cache)
            except BracketFailure as exc:
                return self._failed(cell, "lambda", exc)
            cell.runner = SteeredPolicy(br.policy_minus, br.policy_plus, alpha)
            cell.param_minus, cell.param_plus = br.lambda_minus, br.lambda_plus
            cell.rate_minus = br.smoothed_rates[br.lambda_minus]
            cell.rate_plus = br.smoothed_rates[br.lambda_plus]
            cell.calibration = {"kind": "lambda", "lambda_minus": br.lambda_minus, "lambda_plus": br.lambda_plus,
                                "rate_minus": cell.rate_minus, "rate_plus": cell.rate_plus,
                                "raw_rates": [[k, v] for k, v in sorted(br.raw_rates.items())],
                                "smoothed_rates": [[k, v] for k, v in sorted(br.smoothed_rates.items())]}
        return cell

    def _failed(self, cell: Cell, kind: str, exc: Exception) -> Cell:
        log.warning("%s/%s alpha=%g: calibration failed: %s", cell.policy, cell.estimator, cell.alpha, exc)
        cell.status = "bracket_failure"
        cell.calibration = {"kind": kind, "error": str(exc)}
        return cell

    # execution

    def run(self) -> "SweepOutcome":
        cfg = self.cfg
        cells = [self.build_cell(pol, est, float(a))
                 for pol in cfg.policies for est in cfg.estimators for a in cfg.alphas]
        jobs = [(c, s) for c in cells if c.runner is not None for s in cfg.seeds]
        args = [(c.runner, cfg.chain, c.estimator, cfg.start, cfg.T, s, cfg.delta_max, cfg.burn_in) for c, s in jobs]
        if self.workers > 1 and len(args) > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                metrics = list(pool.map(_run_cell, args))
        else:
            metrics = [_run_cell(a) for a in args]
        rows = []
        for (c, s), m in zip(jobs, metrics):
            rows.append(self._row(c, s, m))
        for c in cells:
            if c.runner is None:
                for s in cfg.seeds:
                    rows.append(self._row(c, s, None))
        rows.sort(key=lambda r: (r["policy"], r["estimator"], r["alpha"], r["seed"]))
        return SweepOutcome(rows, aggregate(rows), cells, self)

    @staticmethod
    def _row(c: Cell, seed, m) -> dict:
        return {"policy": c.policy, "estimator": c.estimator, "alpha": c.alpha, "seed": seed,
                "maoii": m[0] if m else math.nan, "rate": m[1] if m else math.nan,
                "maoii_hat": m[2] if m else math.nan,
                "param_minus": c.param_minus, "param_plus": c.param_plus,
                "rate_minus": c.rate_minus, "rate_plus": c.rate_plus, "status": c.status}


def _run_cell(args):
    runner, chain, est_kind, start, T, seed, delta_max, burn_in = args
    m = sim.run(runner, chain, make_estimator(est_kind, start), T, seed, delta_max, start=start, burn_in=burn_in).metrics
    return m.maoii, m.rate, m.maoii_hat


def aggregate(rows) -> list[dict]:
    """Per (policy, estimator, alpha) mean and standard error over seeds."""
    groups: dict = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["policy"], r["estimator"], r["alpha"]), []).append(r)
    out = []
    for key in sorted(groups):
        g = groups[key]
        maoii = np.array([r["maoii"] for r in g])
        rate = np.array([r["rate"] for r in g])
        n = len(g)
        out.append({"policy": key[0], "estimator": key[1], "alpha": key[2], "n": n,
                    "maoii_mean": float(maoii.mean()), "maoii_se": _se(maoii),
                    "rate_mean": float(rate.mean()), "rate_se": _se(rate),
                    "maoii_hat_mean": float(np.mean([r["maoii_hat"] for r in g]))})
    return out


def _se(x: np.ndarray) -> float:
    return float(x.std(ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


@dataclass
class SweepOutcome:
    rows: list
    aggregate: list
    cells: list
    sweep: Sweep

    @property
    def failures(self) -> int:
        return sum(c.status != "ok" for c in self.cells)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "results.csv", RESULT_COLUMNS, self.rows)
        write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, self.aggregate)
        calib = [{"policy": c.policy, "estimator": c.estimator, "alpha": c.alpha, "status": c.status, **c.calibration}
                 for c in self.cells if c.calibration is not None]
        (out / "calibration.json").write_text(json.dumps(calib, indent=2, sort_keys=True) + "\n")
        self._write_networks(out / "networks")

    def _write_networks(self, net_dir: Path) -> None:
        training = self.sweep.training
        if not training:
            return
        net_dir.mkdir(exist_ok=True)
        for (est_kind, lam), best in sorted(training.items()):
            stem = f"dqn_{est_kind}_lambda_{lam:g}"
            (net_dir / f"{stem}.txt").write_text(best.policy.net.to_text())
            for cand in best.candidates:
                if cand.report is None:
                    continue
                with open(net_dir / f"{stem}_seed{cand.seed}_training.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(dqn.TrainingReport.CSV_COLUMNS)
                    for row in cand.report.rows():
                        w.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_VERSION + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if first.strip() != CSV_VERSION:
            raise ValueError(f"{path}: missing version header")
        return list(csv.DictReader(fh))


def run_sweep(cfg: ExperimentConfig, out_dir=None, workers=None) -> SweepOutcome:
    outcome = Sweep(cfg, out_dir, workers).run()
    outcome.write(out_dir or cfg.output_dir)
    return outcome


# traces

def run_trace(cfg: ExperimentConfig, out_dir, horizon: Optional[int] = None) -> list:
    """Single seeded run with a fixed pull schedule, dumping every belief.

    Writes ``trace.csv`` (per-slot record), ``belief_trace.csv`` (the belief
    of every slot, plus the updated belief whenever a sample arrived) and
    ``branches.csv`` (for each pull, every possible delivered state with its
    probability and the belief it would lead to).
    """
    horizon = horizon or cfg.trace.horizon
    if horizon > 1000:
        raise ConfigError("trace horizon is capped at 1000 slots")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p, dmax = cfg.chain, cfg.delta_max
    est = make_estimator(cfg.estimators[0], cfg.start)
    pulls = set(cfg.trace.pull_slots)
    src_rng, _ = sim.make_rngs(cfg.trace.seed)
    world = sim.init_world(p, cfg.start, src_rng)
    b = bl.point_mass(p.n, dmax, cfg.start)
    records, beliefs, branches = [], [], []
    beliefs.append((0, "belief", b))
    for _ in range(horizon):
        t = world.t
        if world.inflight is not None:
            beliefs.append((t - 1, "updated", bl.observe(b, world.inflight)))
        a = int(t in pulls)
        world, b, est, rec = sim.slot_step(world, b, est, a, p)
        records.append(rec)
        beliefs.append((t, "belief", b))
        if a:
            for o, prob, nb, _ in bl.successor_distribution(b, 1, p, est):
                branches.append((t, o, prob, int(o == world.inflight), bl.expected_aoii(nb), nb))
    sim.write_trace_csv(out / "trace.csv", records)
    with open(out / "belief_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "stage", "state", "delta", "mass"])
        for t, stage, bb in beliefs:
            for i, d, m in bl.belief_rows(bb):
                w.writerow([t, stage, i, d, repr(m)])
        for t, o, _, _, _, nb in branches:
            for i, d, m in bl.belief_rows(nb):
                w.writerow([t + 1, f"branch_{o}", i, d, repr(m)])
    with open(out / "branches.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "observation", "probability", "realized", "next_expected_aoii"])
        for t, o, prob, real, eaoii, _ in branches:
            w.writerow([t, o, repr(prob), real, repr(eaoii)])
    return records
