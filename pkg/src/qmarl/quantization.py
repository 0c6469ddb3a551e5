"""State quantizers and the finite approximation MDP an agent faces.

A quantizer partitions the state interval into bins, each with a
representative state.  Bins are the Voronoi cells of the representatives,
with boundary points assigned to the lower bin, so ``quantize`` agrees with
``argmin_y |y - x|`` under first-index tie-breaking.

The finite approximation model averages stage cost and the bin-to-bin
transition law over each bin under a weighting measure.  Here the weighting
is uniform on the bin (uniform over the bin's points for finite state sets)
and the averages are Monte Carlo estimates; ``exact_finite_env`` computes the
same tables exactly for embedded finite games.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _loops
from .game_model import GameSpec, PerturbedPolicy, QuantizedPolicy, as_perturbed

__all__ = [
    "Quantizer",
    "uniform_quantizer",
    "identity_quantizer",
    "quantize",
    "max_bin_diameter",
    "FiniteEnvModel",
    "build_finite_env",
    "exact_finite_env",
    "ValueIterationResult",
    "value_iteration",
    "ValueIterationError",
    "EmptyBinError",
]


class EmptyBinError(ValueError):
    """Raised when the weighting measure cannot draw a state from a bin."""


class ValueIterationError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class Quantizer:
    """Partition of ``[lo, hi]`` into ``M`` consecutive bins.

    Bin ``0`` is ``[lo, cuts[0]]`` and bin ``j`` is ``(cuts[j-1], cuts[j]]``;
    the last bin ends at ``hi``.  When ``points`` is set the state space is
    the finite set ``points`` and each bin holds the points that fall in it.
    """

    lo: float
    hi: float
    representatives: np.ndarray
    cuts: np.ndarray
    points: np.ndarray | None = None

    def __post_init__(self):
        reps = np.asarray(self.representatives, dtype=float)
        cuts = np.asarray(self.cuts, dtype=float)
        object.__setattr__(self, "representatives", reps)
        object.__setattr__(self, "cuts", cuts)
        if self.points is not None:
            object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        if reps.ndim != 1 or reps.size < 1:
            raise ValueError("a quantizer needs at least one representative")
        if cuts.size != reps.size - 1:
            raise ValueError("need exactly M-1 cut points for M representatives")
        if not self.lo < self.hi and reps.size > 1:
            raise ValueError("empty state interval")
        if np.any(np.diff(cuts) <= 0):
            raise ValueError("cut points must be strictly increasing")
        if cuts.size and (cuts[0] < self.lo or cuts[-1] > self.hi):
            raise ValueError("cut points must lie inside the state interval")
        for j, y in enumerate(reps):
            if not self.in_bin(j, y):
                raise ValueError(f"representative {y} is not inside bin {j}")

    @property
    def n_bins(self) -> int:
        return int(self.representatives.size)

    def bounds(self, j: int) -> tuple[float, float]:
        """Closure of bin ``j`` as an interval."""
        a = self.lo if j == 0 else float(self.cuts[j - 1])
        b = self.hi if j == self.n_bins - 1 else float(self.cuts[j])
        return a, b

    def in_bin(self, j: int, x: float) -> bool:
        a, b = self.bounds(j)
        if j == 0:
            return a <= x <= b
        return a < x <= b

    def bin_points(self, j: int) -> np.ndarray:
        if self.points is None:
            raise ValueError("quantizer has no finite point set")
        return np.array([p for p in self.points if self.in_bin(j, p)])

    def __call__(self, x: float) -> int:
        return quantize(self, x)

    def to_dict(self) -> dict:
        d = {
            "lo": self.lo,
            "hi": self.hi,
            "representatives": self.representatives.tolist(),
            "cuts": self.cuts.tolist(),
        }
        if self.points is not None:
            d["points"] = self.points.tolist()
        return d


def _midpoints(reps: np.ndarray) -> np.ndarray:
    return 0.5 * (reps[:-1] + reps[1:])


def uniform_quantizer(lo: float, hi: float, M: int) -> Quantizer:
    """``M`` evenly spaced representatives on ``[lo, hi]`` with Voronoi bins.

    >>> uniform_quantizer(0.0, 1.0, 5).representatives.tolist()
    [0.0, 0.25, 0.5, 0.75, 1.0]
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    if not lo < hi:
        raise ValueError("need lo < hi")
    if M == 1:
        reps = np.array([0.5 * (lo + hi)])
    else:
        reps = lo + np.arange(M) * (hi - lo) / (M - 1)
        reps[-1] = hi
    return Quantizer(float(lo), float(hi), reps, _midpoints(reps))


def identity_quantizer(points: Sequence[float]) -> Quantizer:
    """One singleton bin per point of a finite state set."""
    pts = np.unique(np.asarray(points, dtype=float))
    lo, hi = float(pts[0]), float(pts[-1])
    return Quantizer(lo, hi if hi > lo else lo + 1.0, pts, _midpoints(pts), points=pts)


def quantize(q: Quantizer, x: float) -> int:
    if not (q.lo <= x <= q.hi):
        raise ValueError(f"state {x} outside [{q.lo}, {q.hi}]")
    return int(np.searchsorted(q.cuts, x, side="left"))


def max_bin_diameter(q: Quantizer, exclude_last: bool = False) -> float:
    """Largest bin diameter, optionally ignoring the final bin."""
    n = q.n_bins - 1 if exclude_last else q.n_bins
    widths = []
    for j in range(n):
        if q.points is not None:
            pts = q.bin_points(j)
            widths.append(float(pts.max() - pts.min()) if pts.size else 0.0)
        else:
            a, b = q.bounds(j)
            widths.append(b - a)
    return max(widths, default=0.0)


@dataclass
class FiniteEnvModel:
    """Finite approximation MDP seen by one agent in a frozen environment.

    ``cost[y, u]`` and ``kernel[y, u, y']`` follow the averaged cost and
    bin-transition law; ``cost_se`` and ``kernel_se`` are per-entry Monte
    Carlo standard errors (zero for exact models).
    """

    cost: np.ndarray
    kernel: np.ndarray
    beta: float
    cost_se: np.ndarray | None = None
    kernel_se: np.ndarray | None = None
    samples_per_bin: int = 0

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        self.kernel = np.asarray(self.kernel, dtype=float)
        M, U = self.cost.shape
        if self.kernel.shape != (M, U, M):
            raise ValueError(f"kernel shape {self.kernel.shape} does not match cost {self.cost.shape}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if np.any(self.kernel < 0) or np.any(np.abs(self.kernel.sum(axis=2) - 1.0) > 1e-9):
            raise ValueError("kernel rows must be probability vectors")
        if self.cost_se is None:
            self.cost_se = np.zeros_like(self.cost)
        if self.kernel_se is None:
            self.kernel_se = np.zeros_like(self.kernel)

    @property
    def n_bins(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "M": self.n_bins,
                "n_actions": self.n_actions,
                "beta": self.beta,
                "samples_per_bin": self.samples_per_bin,
                "cost": self.cost.ravel().tolist(),
                "kernel": self.kernel.ravel().tolist(),
                "cost_se": self.cost_se.ravel().tolist(),
                "kernel_se": self.kernel_se.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "FiniteEnvModel":
        d = json.loads(text)
        M, U = d["M"], d["n_actions"]
        return cls(
            cost=np.array(d["cost"]).reshape(M, U),
            kernel=np.array(d["kernel"]).reshape(M, U, M),
            beta=d["beta"],
            cost_se=np.array(d["cost_se"]).reshape(M, U),
            kernel_se=np.array(d["kernel_se"]).reshape(M, U, M),
            samples_per_bin=d.get("samples_per_bin", 0),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def _profile_arrays(game: GameSpec, agent: int, quantizer: Quantizer, others: Sequence[PerturbedPolicy | QuantizedPolicy | None]):
    """Pack the learner's quantizer and the frozen opponents into loop arrays.

    ``others`` has one entry per agent; the learner's own entry is ignored.
    """
    pols = []
    for j in range(game.n_agents):
        if j == agent:
            pols.append(PerturbedPolicy(QuantizedPolicy(j, quantizer, np.zeros(quantizer.n_bins, dtype=np.int64)), 0.5))
        else:
            if others[j] is None:
                raise ValueError(f"missing policy for opponent {j}")
            pols.append(as_perturbed(others[j]))
    return _loops.pack_policies(game, pols)


def _cell_states(q: Quantizer, y: int, n: int, rng: np.random.Generator, pool: np.ndarray | None = None) -> np.ndarray:
    if pool is not None:
        members = pool[(pool > q.cuts[y - 1]) if y > 0 else (pool >= q.lo)]
        members = members[members <= q.bounds(y)[1]]
        if members.size == 0:
            raise EmptyBinError(f"weighting sample has no state in bin {y}")
        return members[rng.integers(members.size, size=n)]
    if q.points is not None:
        pts = q.bin_points(y)
        if pts.size == 0:
            raise EmptyBinError(f"bin {y} contains no state of the finite state set")
        idx = np.minimum((rng.random(n) * pts.size).astype(np.int64), pts.size - 1)
        return pts[idx]
    a, b = q.bounds(y)
    if not b > a:
        raise EmptyBinError(f"bin {y} has zero width [{a}, {b}]")
    return a + rng.random(n) * (b - a)


def build_finite_env(
    game: GameSpec,
    agent: int,
    others: Sequence[PerturbedPolicy | QuantizedPolicy | None],
    q: Quantizer,
    samples_per_bin: int,
    rng: np.random.Generator,
    weighting: str | np.ndarray = "uniform",
) -> FiniteEnvModel:
    """Monte Carlo estimate of the finite model agent ``agent`` faces.

    For every (bin, own action) cell, ``samples_per_bin`` states are drawn
    from the bin under the weighting measure, the opponents act by their
    perturbed policies
    at that state, and one transition is sampled.  Each cell uses its own
    generator seeded from ``rng`` and the cell coordinates, so the result
    does not depend on evaluation order.

    ``weighting`` is ``"uniform"`` (uniform on each bin) or an array of
    states whose empirical law is the weighting measure, e.g. a long
    trajectory from :func:`~qmarl.game_model.simulate_states`.
    """
    if isinstance(weighting, str):
        if weighting != "uniform":
            raise ValueError(f"unknown weighting {weighting!r}")
        pool = None
    else:
        pool = np.sort(np.asarray(weighting, dtype=float))
    if samples_per_bin < 1:
        raise ValueError("samples_per_bin must be at least 1")
    n = samples_per_bin
    M, U = q.n_bins, game.n_actions(agent)
    packed = _profile_arrays(game, agent, q, others)
    loop = _loops.select(_loops.env_sample_loop, game)
    base = int(rng.integers(2**62))
    cost = np.empty((M, U))
    cost_se = np.empty((M, U))
    kernel = np.empty((M, U, M))
    kernel_se = np.empty((M, U, M))
    width = 2 * game.n_agents + game.noise_dim
    for y in range(M):
        for u in range(U):
            cell_rng = np.random.default_rng([base, y, u])
            xs = _cell_states(q, y, n, cell_rng, pool)
            draws = cell_rng.random((n, width))
            costs, nxt = loop(
                game.kernel, game.cost, game.params, agent, u, xs, draws,
                packed.cuts, packed.n_cuts, packed.policies, packed.n_actions,
                packed.action_values, packed.rho, game.n_agents,
            )
            cost[y, u] = costs.mean()
            cost_se[y, u] = costs.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
            freq = np.bincount(nxt, minlength=M).astype(float) / n
            kernel[y, u] = freq / freq.sum()
            kernel_se[y, u] = np.sqrt(freq * (1.0 - freq) / n)
    return FiniteEnvModel(cost, kernel, game.discounts[agent], cost_se, kernel_se, samples_per_bin=n)


def exact_finite_env(
    game: GameSpec,
    agent: int,
    others: Sequence[PerturbedPolicy | QuantizedPolicy | None],
    q: Quantizer,
) -> FiniteEnvModel:
    """Exact finite model for an embedded finite game.

    Requires ``game.tables`` and a point quantizer for the learner; the
    weighting measure is uniform over each bin's points.
    """
    tables = game.tables
    if tables is None:
        raise ValueError(f"game {game.name!r} has no finite tables")
    if q.points is None:
        raise ValueError("exact models need a quantizer over the finite state set")
    m = tables.n_states
    sizes = [game.n_actions(j) for j in range(game.n_agents)]
    pols = [None if j == agent else as_perturbed(others[j]) for j in range(game.n_agents)]

    def action_probs(j: int, s: int) -> np.ndarray:
        p = pols[j]
        n_j = sizes[j]
        probs = np.full(n_j, p.rho / n_j)
        probs[p.base.action_at(float(game.states[s]))] += 1.0 - p.rho
        return probs

    M, U = q.n_bins, sizes[agent]
    cost = np.zeros((M, U))
    kernel = np.zeros((M, U, M))
    state_bin = np.array([quantize(q, float(v)) for v in game.states])
    for y in range(M):
        members = [s for s in range(m) if state_bin[s] == y]
        if not members:
            raise EmptyBinError(f"bin {y} contains no state of the finite state set")
        w_state = 1.0 / len(members)
        for s in members:
            per_agent = [action_probs(j, s) if j != agent else None for j in range(game.n_agents)]
            for joint in np.ndindex(*sizes):
                p = w_state
                for j in range(game.n_agents):
                    if j != agent:
                        p *= per_agent[j][joint[j]]
                if p == 0.0:
                    continue
                u = joint[agent]
                jidx = tables.joint_index(joint)
                cost[y, u] += p * tables.cost[agent, s, jidx]
                np.add.at(kernel[y, u], state_bin, p * tables.kernel[s, jidx])
    # normalize the per-action mass over the opponents' actions
    mass = kernel.sum(axis=2, keepdims=True)
    kernel = kernel / mass
    cost = cost / mass[..., 0]
    return FiniteEnvModel(cost, kernel, game.discounts[agent])


@dataclass
class ValueIterationResult:
    q: np.ndarray
    iterations: int
    residual: float
    residuals: list[float]

    def greedy(self) -> np.ndarray:
        return np.argmin(self.q, axis=1)


def value_iteration(model: FiniteEnvModel, tol: float = 1e-10, max_iters: int = 100_000) -> ValueIterationResult:
    """Fixed point of ``Q = C + beta * P min_v Q`` from the zero table."""
    C, P, beta = model.cost, model.kernel, model.beta
    Q = np.zeros_like(C)
    residuals = []
    for it in range(1, max_iters + 1):
        Q_new = C + beta * (P @ Q.min(axis=1))
        res = float(np.max(np.abs(Q_new - Q)))
        residuals.append(res)
        Q = Q_new
        if res <= tol:
            return ValueIterationResult(Q, it, res, residuals)
    raise ValueIterationError(
        f"value iteration did not reach tol={tol} in {max_iters} sweeps (residual {residuals[-1]:.3e})",
        residuals[-1],
        max_iters,
    )
