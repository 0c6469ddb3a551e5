"""Decentralized quantized Q-learning with exploration phases.

Every agent quantizes the shared state with its own quantizer, acts by a
rho-perturbation of a frozen baseline policy during an exploration phase,
and runs tabular Q-learning on (bin, own action) with step size
``1 / (1 + n)``, ``n`` counting visits to the cell within the current phase.
At the phase boundary each agent keeps its baseline if it is a
delta-best-reply to its learned table and otherwise draws a new one, then
resets its table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _loops
from .game_model import GameSpec, PerturbedPolicy, QuantizedPolicy
from .quantization import Quantizer

__all__ = [
    "QTable",
    "LearnerConfig",
    "PhaseSchedule",
    "step_size",
    "q_update",
    "admissible_actions",
    "is_delta_best_reply",
    "select_next_policy",
    "PhaseResult",
    "run_exploration_phase",
    "History",
    "run_decentralized_qlearning",
]

CHUNK = 1 << 16


@dataclass
class QTable:
    values: np.ndarray
    visits: np.ndarray

    @classmethod
    def filled(cls, n_bins: int, n_actions: int, value: float | np.ndarray = 0.0) -> "QTable":
        vals = np.broadcast_to(np.asarray(value, dtype=float), (n_bins, n_actions)).copy()
        return cls(vals, np.zeros((n_bins, n_actions), dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "QTable":
        return QTable(self.values.copy(), self.visits.copy())

    def greedy(self) -> np.ndarray:
        return np.argmin(self.values, axis=1)


def step_size(visits: np.ndarray, y: int, u: int) -> float:
    """Learning rate for a cell whose visit count already includes this visit."""
    return 1.0 / (1.0 + visits[y, u])


def q_update(Q: QTable, y: int, u: int, cost: float, y_next: int, beta: float) -> QTable:
    """One in-place Q-learning step on cell ``(y, u)``; returns ``Q``."""
    m = Q.values[y_next].min()
    Q.visits[y, u] += 1
    alpha = step_size(Q.visits, y, u)
    Q.values[y, u] = (1.0 - alpha) * Q.values[y, u] + alpha * (cost + beta * m)
    return Q


def admissible_actions(Q: QTable | np.ndarray, delta: float) -> np.ndarray:
    """Boolean mask ``(M, U)`` of actions within ``delta`` of each bin's minimum."""
    vals = Q.values if isinstance(Q, QTable) else np.asarray(Q)
    return vals <= vals.min(axis=1, keepdims=True) + delta


def is_delta_best_reply(policy: QuantizedPolicy | np.ndarray, Q: QTable | np.ndarray, delta: float) -> bool:
    acts = policy.actions if isinstance(policy, QuantizedPolicy) else np.asarray(policy)
    mask = admissible_actions(Q, delta)
    return bool(mask[np.arange(acts.size), acts].all())


@dataclass
class LearnerConfig:
    quantizer: Quantizer
    rho: float = 0.05
    delta: float = 0.01
    q_reset: float | np.ndarray = 0.0
    inertia: float = 0.0
    explore_eps: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if not 0.0 <= self.inertia < 1.0:
            raise ValueError("inertia must lie in [0, 1)")
        if not 0.0 <= self.explore_eps < 1.0:
            raise ValueError("explore_eps must lie in [0, 1)")
        if self.inertia + self.explore_eps > 1.0:
            raise ValueError("inertia + explore_eps must not exceed 1")

    def fresh_table(self, n_actions: int) -> QTable:
        return QTable.filled(self.quantizer.n_bins, n_actions, self.q_reset)


@dataclass
class PhaseSchedule:
    lengths: list[int]

    def __post_init__(self):
        self.lengths = [int(T) for T in self.lengths]
        if any(T < 1 for T in self.lengths):
            raise ValueError("exploration phase lengths must be >= 1")

    @classmethod
    def constant(cls, T: int, K: int) -> "PhaseSchedule":
        return cls([T] * K)

    @property
    def n_phases(self) -> int:
        return len(self.lengths)


def select_next_policy(
    current: QuantizedPolicy,
    admissible: np.ndarray,
    cfg: LearnerConfig,
    rng: np.random.Generator,
) -> QuantizedPolicy:
    """Keep a delta-best-reply; otherwise stay (inertia), explore, or resample.

    Not best-replying, the agent keeps ``current`` w.p. ``inertia``, draws a
    uniformly random policy w.p. ``explore_eps``, and otherwise draws each
    bin's action uniformly from that bin's admissible actions.
    """
    admissible = np.asarray(admissible, dtype=bool)
    M, U = admissible.shape
    if not admissible.any(axis=1).all():
        raise ValueError("every bin needs at least one admissible action")
    if admissible[np.arange(M), current.actions].all():
        return current
    r = rng.random()
    if r < cfg.inertia:
        return current
    draws = rng.random(M)
    if r < cfg.inertia + cfg.explore_eps:
        acts = np.minimum((draws * U).astype(np.int64), U - 1)
    else:
        acts = np.empty(M, dtype=np.int64)
        for y in range(M):
            choices = np.flatnonzero(admissible[y])
            acts[y] = choices[min(int(draws[y] * choices.size), choices.size - 1)]
    return QuantizedPolicy(current.agent, current.quantizer, acts)


@dataclass
class PhaseResult:
    tables: list[QTable]
    x_final: float

    def visit_summary(self) -> list[dict]:
        return [
            {"visited_cells": int((t.visits > 0).sum()), "cells": int(t.visits.size), "min_visits": int(t.visits.min())}
            for t in self.tables
        ]


def run_exploration_phase(
    game: GameSpec,
    baselines: Sequence[QuantizedPolicy],
    cfgs: Sequence[LearnerConfig],
    T: int,
    x0: float,
    rng: np.random.Generator,
) -> PhaseResult:
    """Run ``T`` steps of simultaneous play and per-agent Q-learning.

    Tables start from each agent's ``q_reset``.  Uniform draws are pulled
    from ``rng`` in blocks of ``(CHUNK, 2N + noise_dim)``.
    """
    if T < 1:
        raise ValueError("phase length must be >= 1")
    game.check_state(x0)
    N = game.n_agents
    perturbed = [PerturbedPolicy(b, c.rho) for b, c in zip(baselines, cfgs)]
    packed = _loops.pack_policies(game, perturbed)
    max_m = packed.policies.shape[1]
    max_u = packed.action_values.shape[1]
    Q = np.zeros((N, max_m, max_u))
    visits = np.zeros((N, max_m, max_u), dtype=np.int64)
    for i, c in enumerate(cfgs):
        M_i, U_i = c.quantizer.n_bins, game.n_actions(i)
        Q[i, :M_i, :U_i] = c.fresh_table(U_i).values
    betas = np.array(game.discounts)
    loop = _loops.select(_loops.phase_loop, game)
    width = 2 * N + game.noise_dim
    x = float(x0)
    done = 0
    while done < T:
        n = min(CHUNK, T - done)
        draws = rng.random((n, width))
        x = loop(
            game.kernel, game.cost, game.params, x, draws, betas,
            packed.cuts, packed.n_cuts, packed.policies, packed.n_actions,
            packed.action_values, packed.rho, N, Q, visits,
        )
        done += n
    tables = []
    for i, c in enumerate(cfgs):
        M_i, U_i = c.quantizer.n_bins, game.n_actions(i)
        tables.append(QTable(Q[i, :M_i, :U_i].copy(), visits[i, :M_i, :U_i].copy()))
    return PhaseResult(tables, float(x))


@dataclass
class History:
    """Baseline joint policies ``pi_0 .. pi_K`` and who switched at each update."""

    policies: list[list[np.ndarray]]
    switched: list[list[bool]]
    x_final: float
    snapshots: list[list[QTable]] = field(default_factory=list)

    @property
    def n_phases(self) -> int:
        return len(self.policies) - 1

    def to_dict(self) -> dict:
        return {
            "phases": [
                {
                    "phase": k,
                    "agents": [
                        {"actions": acts.tolist(), "switched": sw}
                        for acts, sw in zip(joint, self.switched[k])
                    ],
                }
                for k, joint in enumerate(self.policies)
            ],
            "x_final": self.x_final,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def run_decentralized_qlearning(
    game: GameSpec,
    cfgs: Sequence[LearnerConfig],
    schedule: PhaseSchedule,
    x0: float,
    rng: np.random.Generator,
    initial: Sequence[np.ndarray] | None = None,
    keep_snapshots: bool = False,
) -> History:
    """Full multi-phase learner; the state carries over between phases."""
    N = game.n_agents
    if len(cfgs) != N:
        raise ValueError("one learner config per agent")
    if initial is None:
        initial = [np.zeros(c.quantizer.n_bins, dtype=np.int64) for c in cfgs]
    current = [QuantizedPolicy(i, cfgs[i].quantizer, initial[i]) for i in range(N)]
    policies = [[p.actions.copy() for p in current]]
    switched = [[False] * N]
    snapshots = []
    x = float(x0)
    for T in schedule.lengths:
        phase = run_exploration_phase(game, current, cfgs, T, x, rng)
        x = phase.x_final
        if keep_snapshots:
            snapshots.append(phase.tables)
        nxt = []
        for i in range(N):
            mask = admissible_actions(phase.tables[i], cfgs[i].delta)
            nxt.append(select_next_policy(current[i], mask, cfgs[i], rng))
        switched.append([not np.array_equal(a.actions, b.actions) for a, b in zip(current, nxt)])
        current = nxt
        policies.append([p.actions.copy() for p in current])
    return History(policies, switched, x, snapshots)
