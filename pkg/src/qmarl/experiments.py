"""Batch runs of decentralized Q-learning on the team game.

A trial starts from an anti-cooperating joint policy and a uniformly
random state, runs a fixed number of exploration phases of length ``T``,
and records after every phase whether the agents cooperate at every bin.
Trials are aggregated per ``(T, phase)`` with Clopper-Pearson intervals.

Trial seeds: the 64-bit integer drawn from
``SeedSequence(master_seed, spawn_key=(trial,))``; the same trial index
uses the same seed for every ``T``.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .game_model import GameSpec, QuantizedPolicy
from .games import TEAM_DEFAULTS, build_team_game
from .qlearning import LearnerConfig, PhaseSchedule, run_decentralized_qlearning
from .quantization import uniform_quantizer

__all__ = [
    "build_team_game",
    "ExperimentConfig",
    "TrialResult",
    "AggregateRow",
    "ExperimentResult",
    "trial_seed",
    "is_team_optimal",
    "initial_policies",
    "run_trial",
    "aggregate",
    "clopper_pearson",
    "run_experiment",
    "emit_plot_data",
    "read_plot_data",
    "write_trials_csv",
    "write_aggregate_csv",
]

TRIAL_COLUMNS = ["T", "trial", "seed", "phase", "joint_policy_id", "is_optimal", "agent1_switched", "agent2_switched"]
AGGREGATE_COLUMNS = ["T", "phase", "fraction", "ci_low", "ci_high", "n_trials"]
PLOT_COLUMNS = ["T", "phase", "fraction", "ci_low", "ci_high"]


@dataclass
class ExperimentConfig:
    game: dict = field(default_factory=lambda: dict(TEAM_DEFAULTS))
    n_bins: int = 5
    rho: float = 0.05
    delta: float = 0.01
    q_reset: float = 0.0
    inertia: tuple[float, ...] = (0.25, 0.75)
    explore_eps: tuple[float, ...] = (0.0, 0.0)
    T_values: tuple[int, ...] = (100, 1000, 10_000, 100_000)
    trials: int = 50
    phases: int = 10
    init: str = "anti"
    x0: str | float = "uniform"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        self.inertia = tuple(float(v) for v in self.inertia)
        self.explore_eps = tuple(float(v) for v in self.explore_eps)
        self.T_values = tuple(int(T) for T in self.T_values)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.phases < 1:
            raise ValueError("tracked phases must be >= 1")
        if not self.T_values or any(T < 1 for T in self.T_values):
            raise ValueError("phase lengths T must be >= 1")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.init not in ("anti", "cooperative", "random"):
            raise ValueError(f"unknown initial-policy rule {self.init!r}")
        if isinstance(self.x0, str):
            if self.x0 != "uniform":
                raise ValueError(f"x0 must be 'uniform' or a number, got {self.x0!r}")
        elif not 0.0 <= float(self.x0) <= 1.0:
            raise ValueError("x0 must lie in [0, 1]")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        n = self.n_agents
        if len(self.inertia) != n or len(self.explore_eps) != n:
            raise ValueError("inertia and explore_eps need one value per agent")
        self.learners()  # validates rho, delta and the update-rule mix

    @property
    def n_agents(self) -> int:
        return int(self.game.get("n_agents", 2))

    def build_game(self) -> GameSpec:
        name = self.game.get("name", "team")
        if name != "team":
            raise ValueError(f"unknown game {name!r}")
        params = {k: v for k, v in self.game.items() if k != "name"}
        return build_team_game(**params)

    def learners(self) -> list[LearnerConfig]:
        q = uniform_quantizer(0.0, 1.0, self.n_bins)
        return [
            LearnerConfig(q, self.rho, self.delta, self.q_reset, self.inertia[i], self.explore_eps[i])
            for i in range(self.n_agents)
        ]

    def to_dict(self) -> dict:
        return {
            "game": dict(self.game),
            "n_bins": self.n_bins,
            "rho": self.rho,
            "delta": self.delta,
            "q_reset": self.q_reset,
            "inertia": list(self.inertia),
            "explore_eps": list(self.explore_eps),
            "T_values": list(self.T_values),
            "trials": self.trials,
            "phases": self.phases,
            "init": self.init,
            "x0": self.x0,
            "seed": self.seed,
            "threads": self.threads,
        }


@dataclass
class TrialResult:
    trial: int
    seed: int
    T: int
    joint_ids: list[int]
    optimal: list[bool]
    switched: list[list[bool]]
    x0: float

    @property
    def n_phases(self) -> int:
        return len(self.joint_ids)


@dataclass
class AggregateRow:
    T: int
    phase: int
    fraction: float
    ci_low: float
    ci_high: float
    n_trials: int


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    trials: list[TrialResult]
    aggregate: list[AggregateRow]
    runtimes: dict[int, float]

    def fraction(self, T: int, phase: int) -> float:
        for r in self.aggregate:
            if r.T == T and r.phase == phase:
                return r.fraction
        raise KeyError((T, phase))

    def trial_means(self, T: int, phases: Sequence[int]) -> np.ndarray:
        """Per-trial fraction of optimal phases among ``phases``, by trial index."""
        rows = sorted((t for t in self.trials if t.T == T), key=lambda t: t.trial)
        return np.array([np.mean([t.optimal[k] for k in phases]) for t in rows])


def trial_seed(master: int, trial: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(trial,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def is_team_optimal(joint: Sequence[QuantizedPolicy]) -> bool:
    """True iff every agent picks the same action at every bin."""
    first = joint[0]
    for p in joint[1:]:
        q, r = p.quantizer, first.quantizer
        if q.n_bins != r.n_bins or not np.array_equal(q.cuts, r.cuts):
            raise ValueError("team optimality needs a shared quantizer")
    return all(np.array_equal(p.actions, first.actions) for p in joint[1:])


def initial_policies(rule: str, n_agents: int, n_bins: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Anti-cooperating start is agent 0 on +1 everywhere and the rest on -1."""
    if rule == "anti":
        return [np.full(n_bins, 1 if i == 0 else 0, dtype=np.int64) for i in range(n_agents)]
    if rule == "cooperative":
        return [np.ones(n_bins, dtype=np.int64) for _ in range(n_agents)]
    return [rng.integers(0, 2, n_bins) for _ in range(n_agents)]


def _joint_id(policies: Sequence[np.ndarray], n_actions: int = 2) -> int:
    j = 0
    for acts in policies:
        p = 0
        for a in acts:
            p = p * n_actions + int(a)
        j = j * n_actions ** len(acts) + p
    return j


def run_trial(cfg: ExperimentConfig, trial_index: int, T: int | None = None) -> TrialResult:
    T = cfg.T_values[0] if T is None else int(T)
    seed = trial_seed(cfg.seed, trial_index)
    rng = np.random.default_rng(seed)
    game = cfg.build_game()
    cfgs = cfg.learners()
    x0 = float(rng.random()) if cfg.x0 == "uniform" else float(cfg.x0)
    init = initial_policies(cfg.init, game.n_agents, cfg.n_bins, rng)
    hist = run_decentralized_qlearning(
        game, cfgs, PhaseSchedule.constant(T, cfg.phases - 1) if cfg.phases > 1 else PhaseSchedule([]),
        x0, rng, initial=init,
    )
    q = cfgs[0].quantizer
    optimal = [is_team_optimal([QuantizedPolicy(i, q, a) for i, a in enumerate(joint)]) for joint in hist.policies]
    return TrialResult(
        trial=trial_index,
        seed=seed,
        T=T,
        joint_ids=[_joint_id(joint) for joint in hist.policies],
        optimal=optimal,
        switched=hist.switched,
        x0=x0,
    )


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


def aggregate(trials: Sequence[TrialResult]) -> list[AggregateRow]:
    rows = []
    for T in sorted({t.T for t in trials}):
        batch = sorted((t for t in trials if t.T == T), key=lambda t: t.trial)
        n = len(batch)
        for k in range(batch[0].n_phases):
            hits = sum(t.optimal[k] for t in batch)
            lo, hi = clopper_pearson(hits, n)
            rows.append(AggregateRow(T, k, hits / n, lo, hi, n))
    return rows


def _run_one(args):
    cfg, trial, T = args
    return run_trial(cfg, trial, T)


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    """All trials for every ``T``; order of completion does not affect results."""
    trials: list[TrialResult] = []
    runtimes = {}
    pool = ProcessPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for T in cfg.T_values:
            start = time.perf_counter()
            jobs = [(cfg, k, T) for k in range(cfg.trials)]
            batch = list(pool.map(_run_one, jobs)) if pool else [_run_one(j) for j in jobs]
            runtimes[T] = time.perf_counter() - start
            trials.extend(batch)
            if progress:
                progress(T, runtimes[T])
    finally:
        if pool:
            pool.shutdown()
    trials.sort(key=lambda t: (cfg.T_values.index(t.T), t.trial))
    return ExperimentResult(cfg, trials, aggregate(trials), runtimes)


def _write_csv(path: Path | None, header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as e:
            raise OSError(f"cannot write {path}: {e.strerror}") from e
    return text


def write_trials_csv(result: ExperimentResult, path: Path | None = None) -> str:
    rows = []
    for t in result.trials:
        for k in range(t.n_phases):
            sw = t.switched[k]
            rows.append([t.T, t.trial, t.seed, k, t.joint_ids[k], int(t.optimal[k]), int(sw[0]), int(sw[1] if len(sw) > 1 else 0)])
    return _write_csv(path, TRIAL_COLUMNS, rows)


def write_aggregate_csv(rows: Sequence[AggregateRow], path: Path | None = None) -> str:
    return _write_csv(path, AGGREGATE_COLUMNS, [[r.T, r.phase, repr(r.fraction), repr(r.ci_low), repr(r.ci_high), r.n_trials] for r in rows])


def emit_plot_data(rows: Sequence[AggregateRow], path: Path | None = None) -> str:
    """Phase-vs-fraction table, one series per ``T``."""
    return _write_csv(path, PLOT_COLUMNS, [[r.T, r.phase, repr(r.fraction), repr(r.ci_low), repr(r.ci_high)] for r in rows])


def read_plot_data(source: str | Path) -> list[dict]:
    text = Path(source).read_text() if isinstance(source, Path) else source
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({
            "T": int(rec["T"]),
            "phase": int(rec["phase"]),
            "fraction": float(rec["fraction"]),
            "ci_low": float(rec["ci_low"]),
            "ci_high": float(rec["ci_high"]),
        })
    return out
