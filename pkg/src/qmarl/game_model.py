"""Stochastic games on a compact interval with finite action sets.

A game's transition kernel is a pure function ``kernel(x, u, w, params)``
of the state, the joint action *values* ``u`` and a fixed-width vector ``w``
of uniform draws; all randomness therefore comes from the caller's
generator and every trajectory is replayable.  Stage costs are
``cost(i, x, u, params)``.  When both callables are numba-jitted the
simulation loops run compiled; plain Python callables also work, just
slower.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from . import _loops

if TYPE_CHECKING:
    from .quantization import Quantizer

__all__ = [
    "GameSpec",
    "FiniteTables",
    "QuantizedPolicy",
    "PerturbedPolicy",
    "as_perturbed",
    "sample_transition",
    "stage_cost",
    "perturbed_action",
    "PolicyEvaluation",
    "HorizonTooShortError",
    "required_horizon",
    "truncation_bound",
    "evaluate_joint_policy",
    "simulate_states",
]


class HorizonTooShortError(ValueError):
    def __init__(self, message: str, required_horizon: int):
        super().__init__(message)
        self.required_horizon = required_horizon


@dataclass(frozen=True, eq=False)
class FiniteTables:
    """Cost and kernel tables of a finite game, indexed by joint action.

    ``kernel[s, j, s']`` and ``cost[i, s, j]`` with ``j`` the mixed-radix
    joint-action index (agent 0 most significant).
    """

    kernel: np.ndarray
    cost: np.ndarray
    action_counts: tuple[int, ...]

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    def joint_index(self, actions: Sequence[int]) -> int:
        j = 0
        for a, n in zip(actions, self.action_counts):
            j = j * n + int(a)
        return j


@dataclass(frozen=True, eq=False)
class GameSpec:
    name: str
    n_agents: int
    lo: float
    hi: float
    action_sets: tuple[np.ndarray, ...]
    kernel: Callable
    cost: Callable
    noise_dim: int
    discounts: tuple[float, ...]
    c_max: float
    params: np.ndarray = field(default_factory=lambda: np.zeros(1))
    states: np.ndarray | None = None
    tables: FiniteTables | None = None

    def __post_init__(self):
        object.__setattr__(self, "action_sets", tuple(np.asarray(a, dtype=float) for a in self.action_sets))
        object.__setattr__(self, "discounts", tuple(float(b) for b in self.discounts))
        object.__setattr__(self, "params", np.ascontiguousarray(self.params, dtype=float))
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if len(self.action_sets) != self.n_agents or len(self.discounts) != self.n_agents:
            raise ValueError("one action set and one discount per agent")
        if any(a.size == 0 for a in self.action_sets):
            raise ValueError("action sets must be non-empty")
        if any(not 0.0 <= b < 1.0 for b in self.discounts):
            raise ValueError("discounts must lie in [0, 1)")
        if not self.lo < self.hi:
            raise ValueError("state interval must have lo < hi")
        if not self.c_max > 0:
            raise ValueError("c_max must be positive")

    def n_actions(self, agent: int) -> int:
        return int(self.action_sets[agent].size)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(self.n_actions(i) for i in range(self.n_agents))

    def check_state(self, x: float) -> None:
        if not (self.lo <= x <= self.hi) or math.isnan(x):
            raise ValueError(f"state {x} outside [{self.lo}, {self.hi}]")

    def action_values(self, u: Sequence[int]) -> np.ndarray:
        if len(u) != self.n_agents:
            raise ValueError(f"joint action needs {self.n_agents} entries, got {len(u)}")
        vals = np.empty(self.n_agents)
        for i, a in enumerate(u):
            if not 0 <= a < self.n_actions(i):
                raise ValueError(f"action index {a} out of range for agent {i}")
            vals[i] = self.action_sets[i][a]
        return vals


@dataclass(frozen=True, eq=False)
class QuantizedPolicy:
    """Deterministic map from an agent's bins to its action indices."""

    agent: int
    quantizer: "Quantizer"
    actions: np.ndarray

    def __post_init__(self):
        acts = np.asarray(self.actions, dtype=np.int64)
        object.__setattr__(self, "actions", acts)
        if acts.shape != (self.quantizer.n_bins,):
            raise ValueError(f"policy needs one action per bin ({self.quantizer.n_bins}), got shape {acts.shape}")
        if np.any(acts < 0):
            raise ValueError("action indices must be non-negative")

    def action_at(self, x: float) -> int:
        return int(self.actions[self.quantizer(x)])

    def __eq__(self, other):
        if not isinstance(other, QuantizedPolicy):
            return NotImplemented
        return self.agent == other.agent and self.quantizer is other.quantizer and np.array_equal(self.actions, other.actions)

    def __hash__(self):
        return hash((self.agent, id(self.quantizer), self.actions.tobytes()))


@dataclass(frozen=True, eq=False)
class PerturbedPolicy:
    base: QuantizedPolicy
    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")


def as_perturbed(p: PerturbedPolicy | QuantizedPolicy) -> PerturbedPolicy:
    """Deterministic policies enter the loops as rho=0 perturbations."""
    if isinstance(p, PerturbedPolicy):
        return p
    pp = object.__new__(PerturbedPolicy)
    object.__setattr__(pp, "base", p)
    object.__setattr__(pp, "rho", 0.0)
    return pp


def sample_transition(game: GameSpec, x: float, u: Sequence[int], rng: np.random.Generator) -> float:
    """Draw ``x'`` given state and joint action indices.

    Consumes exactly ``game.noise_dim`` uniforms from ``rng``.
    """
    game.check_state(x)
    vals = game.action_values(u)
    w = rng.random(game.noise_dim)
    return float(game.kernel(float(x), vals, w, game.params))


def stage_cost(game: GameSpec, agent: int, x: float, u: Sequence[int]) -> float:
    if not 0 <= agent < game.n_agents:
        raise ValueError(f"no agent {agent}")
    game.check_state(x)
    return float(game.cost(agent, float(x), game.action_values(u), game.params))


def perturbed_action(p: PerturbedPolicy, bin: int, rng: np.random.Generator, n_actions: int) -> int:
    """Base action w.p. ``1 - rho``, else uniform over all ``n_actions``.

    Uses two uniforms per call, in the same way the simulation loops do.
    """
    if not 0 <= bin < p.base.quantizer.n_bins:
        raise ValueError(f"bin {bin} out of range")
    e, a = rng.random(2)
    return _loops.choose_action(int(p.base.actions[bin]), p.rho, e, a, n_actions)


def truncation_bound(beta: float, horizon: int, c_max: float) -> float:
    return beta**horizon * c_max / (1.0 - beta)


def required_horizon(beta: float, c_max: float, tol: float) -> int:
    if beta == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol * (1.0 - beta) / c_max) / math.log(beta)))


@dataclass
class PolicyEvaluation:
    mean: np.ndarray
    stderr: np.ndarray
    truncation_bound: np.ndarray
    horizon: int
    episodes: int
    returns: np.ndarray

    def __repr__(self):
        return f"PolicyEvaluation(mean={self.mean}, stderr={self.stderr}, H={self.horizon})"


def evaluate_joint_policy(
    game: GameSpec,
    policies: Sequence[PerturbedPolicy | QuantizedPolicy],
    x0: float,
    horizon: int,
    episodes: int,
    rng: np.random.Generator,
    tol: float | None = None,
) -> PolicyEvaluation:
    """Monte Carlo estimate of each agent's discounted cost from ``x0``.

    Returns are truncated at ``horizon`` steps; the per-agent truncation
    bias bound ``beta**H * c_max / (1 - beta)`` is reported, and if ``tol``
    is given a horizon that cannot meet it is rejected.
    """
    game.check_state(x0)
    if len(policies) != game.n_agents:
        raise ValueError("one policy per agent")
    if episodes < 1:
        raise ValueError("need at least one episode")
    bounds = np.array([truncation_bound(b, horizon, game.c_max) for b in game.discounts])
    if tol is not None and np.any(bounds > tol):
        need = max(required_horizon(b, game.c_max, tol) for b in game.discounts)
        raise HorizonTooShortError(
            f"horizon {horizon} leaves truncation bias {bounds.max():.3e} > tol {tol}; need H >= {need}", need
        )
    packed = _loops.pack_policies(game, [as_perturbed(p) for p in policies])
    width = 2 * game.n_agents + game.noise_dim
    draws = rng.random((episodes, horizon, width))
    loop = _loops.select(_loops.eval_loop, game)
    x0s = np.full(episodes, float(x0))
    returns = loop(
        game.kernel, game.cost, game.params, x0s, draws, np.array(game.discounts),
        packed.cuts, packed.n_cuts, packed.policies, packed.n_actions,
        packed.action_values, packed.rho, game.n_agents,
    )
    mean = returns.mean(axis=0)
    se = returns.std(axis=0, ddof=1) / np.sqrt(episodes) if episodes > 1 else np.zeros(game.n_agents)
    return PolicyEvaluation(mean, se, bounds, horizon, episodes, returns)


def simulate_states(
    game: GameSpec,
    policies: Sequence[PerturbedPolicy | QuantizedPolicy],
    x0: float,
    steps: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """State path ``x_0 .. x_steps`` under a stationary joint policy."""
    game.check_state(x0)
    packed = _loops.pack_policies(game, [as_perturbed(p) for p in policies])
    draws = rng.random((steps, 2 * game.n_agents + game.noise_dim))
    loop = _loops.select(_loops.path_loop, game)
    return loop(
        game.kernel, game.cost, game.params, float(x0), draws,
        packed.cuts, packed.n_cuts, packed.policies, packed.n_actions,
        packed.action_values, packed.rho, game.n_agents,
    )
