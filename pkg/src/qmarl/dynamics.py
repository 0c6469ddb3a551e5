"""Best-reply policy-update dynamics as a Markov chain over joint policies.

Each agent's policy set is every map from its bins to its actions, indexed
in base ``|U|`` with bin 0 as the most significant digit; joint policies
are indexed mixed-radix with agent 0 most significant.  Given the
best-reply sets induced by limiting Q-factors, an agent that is
best-replying keeps its policy and otherwise moves according to an update
rule (inertia, uniform exploration, uniform over the best-reply set).  The
joint chain is the product of the agents' independent moves, and its
absorbing states are exactly the joint policies where everyone
best-replies.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from .game_model import (
    GameSpec,
    PerturbedPolicy,
    QuantizedPolicy,
    evaluate_joint_policy,
    required_horizon,
)
from .quantization import Quantizer, build_finite_env, exact_finite_env, value_iteration

__all__ = [
    "ENUMERATION_CAP",
    "CapExceededError",
    "NonAbsorbingChainError",
    "JointPolicySpace",
    "UpdateRule",
    "BestReplyGraph",
    "build_best_reply_graph",
    "graph_from_masks",
    "agent_transition_row",
    "PolicyChain",
    "joint_transition_matrix",
    "chain_from_matrix",
    "classify_and_canonicalize",
    "absorption_probabilities",
    "expected_steps_to_absorption",
    "limit_matrix",
    "simulate_idealized",
    "sample_idealized",
    "sample_chain",
    "AuditReport",
    "audit_equilibrium",
]

ENUMERATION_CAP = 2**20
DENSE_SOLVE_LIMIT = 8192


class CapExceededError(ValueError):
    def __init__(self, required: int, allowed: int = ENUMERATION_CAP):
        super().__init__(f"joint policy space has {required} elements; the enumeration cap is {allowed}")
        self.required = required
        self.allowed = allowed


class NonAbsorbingChainError(ValueError):
    pass


class JointPolicySpace:
    """Enumeration of deterministic quantized joint policies."""

    def __init__(self, n_bins: Sequence[int], n_actions: Sequence[int], cap: int = ENUMERATION_CAP):
        self.n_bins = tuple(int(m) for m in n_bins)
        self.n_actions = tuple(int(u) for u in n_actions)
        if len(self.n_bins) != len(self.n_actions):
            raise ValueError("one bin count and one action count per agent")
        self.policy_counts = tuple(u**m for m, u in zip(self.n_bins, self.n_actions))
        self.size = math.prod(self.policy_counts)
        if self.size > cap:
            raise CapExceededError(self.size, cap)
        self._tables = [None] * self.n_agents

    @classmethod
    def for_game(cls, game: GameSpec, quantizers: Sequence[Quantizer], cap: int = ENUMERATION_CAP):
        return cls([q.n_bins for q in quantizers], game.action_counts, cap)

    @property
    def n_agents(self) -> int:
        return len(self.n_bins)

    def encode(self, policy_indices: Sequence[int]) -> int:
        j = 0
        for p, n in zip(policy_indices, self.policy_counts):
            if not 0 <= p < n:
                raise ValueError(f"policy index {p} out of range {n}")
            j = j * n + int(p)
        return j

    def decode(self, joint: int) -> tuple[int, ...]:
        if not 0 <= joint < self.size:
            raise ValueError(f"joint index {joint} out of range {self.size}")
        joint = int(joint)
        out = []
        for n in reversed(self.policy_counts):
            joint, p = divmod(joint, n)
            out.append(p)
        return tuple(reversed(out))

    def policy_index(self, agent: int, actions: Sequence[int]) -> int:
        U = self.n_actions[agent]
        idx = 0
        for a in actions:
            idx = idx * U + int(a)
        return idx

    def policy_actions(self, agent: int, index: int) -> np.ndarray:
        return self.action_table(agent)[index]

    def action_table(self, agent: int) -> np.ndarray:
        """``(|Pi^i|, M_i)`` array: row ``p`` lists policy ``p``'s actions."""
        if self._tables[agent] is None:
            M, U = self.n_bins[agent], self.n_actions[agent]
            idx = np.arange(self.policy_counts[agent])
            digits = np.empty((idx.size, M), dtype=np.int64)
            for y in range(M - 1, -1, -1):
                idx, digits[:, y] = np.divmod(idx, U)
            self._tables[agent] = digits
        return self._tables[agent]

    def encode_actions(self, actions: Sequence[Sequence[int]]) -> int:
        return self.encode([self.policy_index(i, a) for i, a in enumerate(actions)])

    def opponent_count(self, agent: int) -> int:
        return self.size // self.policy_counts[agent]

    def opponent_index(self, agent: int, policy_indices: Sequence[int]) -> int:
        j = 0
        for k, (p, n) in enumerate(zip(policy_indices, self.policy_counts)):
            if k != agent:
                j = j * n + int(p)
        return j

    def opponent_policies(self, agent: int, profile: int) -> dict[int, int]:
        out = {}
        for k in reversed(range(self.n_agents)):
            if k == agent:
                continue
            profile, out[k] = divmod(profile, self.policy_counts[k])
        return out


@dataclass(frozen=True)
class UpdateRule:
    """Policy-switching distribution for an agent that is not best-replying."""

    inertia: float = 0.0
    explore_eps: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.inertia < 1.0 or not 0.0 <= self.explore_eps < 1.0:
            raise ValueError("inertia and explore_eps must lie in [0, 1)")
        if self.inertia + self.explore_eps > 1.0:
            raise ValueError("inertia + explore_eps must not exceed 1")


def _rules(psi, n_agents: int) -> list[UpdateRule]:
    if isinstance(psi, UpdateRule):
        return [psi] * n_agents
    psi = list(psi)
    if len(psi) != n_agents:
        raise ValueError("one update rule per agent")
    return psi


@dataclass
class BestReplyGraph:
    """Per-agent best-reply sets for every opponent profile.

    ``masks[i][profile]`` is an ``(M_i, U_i)`` boolean array; the best-reply
    set is the product over bins of the admissible actions.  ``gaps`` holds
    ``Q(y,u) - min_v Q(y,v) - delta`` (admissible iff ``<= 0``) and
    ``gap_se`` its bootstrap standard error for Monte Carlo graphs.
    """

    space: JointPolicySpace
    masks: list[np.ndarray]
    provenance: str
    delta: tuple[float, ...]
    gaps: list[np.ndarray] | None = None
    gap_se: list[np.ndarray] | None = None
    q_values: list[np.ndarray] | None = None

    def __post_init__(self):
        for i, m in enumerate(self.masks):
            if not m.any(axis=2).all():
                raise ValueError(f"agent {i} has an empty best-reply set")

    def mask(self, agent: int, joint: int) -> np.ndarray:
        pols = self.space.decode(joint)
        return self.masks[agent][self.space.opponent_index(agent, pols)]

    def contains(self, agent: int, joint: int) -> bool:
        pols = self.space.decode(joint)
        mask = self.masks[agent][self.space.opponent_index(agent, pols)]
        acts = self.space.policy_actions(agent, pols[agent])
        return bool(mask[np.arange(acts.size), acts].all())

    def is_equilibrium(self, joint: int) -> bool:
        return all(self.contains(i, joint) for i in range(self.space.n_agents))

    def br_policies(self, agent: int, profile: int) -> np.ndarray:
        mask = self.masks[agent][profile]
        table = self.space.action_table(agent)
        ok = mask[np.arange(mask.shape[0]), table].all(axis=1)
        return np.flatnonzero(ok)

    def flagged_cells(self, z: float = 3.0) -> list[tuple[int, int, int, int]]:
        """``(agent, profile, bin, action)`` cells whose decision is within ``z`` SE of the threshold."""
        if self.gap_se is None:
            return []
        out = []
        for i, (g, s) in enumerate(zip(self.gaps, self.gap_se)):
            for prof, y, u in zip(*np.nonzero(np.abs(g) < z * s)):
                out.append((i, int(prof), int(y), int(u)))
        return out

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "delta": list(self.delta),
            "policy_counts": list(self.space.policy_counts),
            "best_replies": [
                [self.br_policies(i, prof).tolist() for prof in range(self.space.opponent_count(i))]
                for i in range(self.space.n_agents)
            ],
            "flagged_cells": self.flagged_cells(),
        }


def graph_from_masks(space: JointPolicySpace, masks: Sequence[np.ndarray], provenance: str = "given") -> BestReplyGraph:
    return BestReplyGraph(space, [np.asarray(m, dtype=bool) for m in masks], provenance, (0.0,) * space.n_agents)


def build_best_reply_graph(
    game: GameSpec,
    quantizers: Sequence[Quantizer],
    rho: float | Sequence[float],
    delta: float | Sequence[float],
    oracle: str = "mc",
    samples_per_bin: int = 20_000,
    seed: int = 0,
    vi_tol: float = 1e-10,
    bootstrap: int = 20,
    cap: int = ENUMERATION_CAP,
) -> BestReplyGraph:
    """Best-reply sets from the oracle Q-factors of every frozen environment.

    ``oracle="exact"`` uses the exact finite model (embedded finite games
    only); ``"mc"`` estimates the model by Monte Carlo and attaches
    parametric-bootstrap standard errors to each admissibility gap.
    """
    N = game.n_agents
    space = JointPolicySpace.for_game(game, quantizers, cap)
    rhos = [float(r) for r in rho] if np.ndim(rho) else [float(rho)] * N
    deltas = tuple(float(d) for d in delta) if np.ndim(delta) else (float(delta),) * N
    if oracle not in ("exact", "mc"):
        raise ValueError(f"unknown oracle {oracle!r}")
    masks, gaps, gap_se, qvals = [], [], [], []
    for i in range(N):
        n_prof = space.opponent_count(i)
        M, U = quantizers[i].n_bins, game.n_actions(i)
        mask_i = np.zeros((n_prof, M, U), dtype=bool)
        gap_i = np.zeros((n_prof, M, U))
        se_i = np.zeros((n_prof, M, U))
        q_i = np.zeros((n_prof, M, U))
        for prof in range(n_prof):
            others: list = [None] * N
            for k, p in space.opponent_policies(i, prof).items():
                base = QuantizedPolicy(k, quantizers[k], space.policy_actions(k, p))
                others[k] = PerturbedPolicy(base, rhos[k])
            if oracle == "exact":
                model = exact_finite_env(game, i, others, quantizers[i])
            else:
                rng = np.random.default_rng([seed, i, prof])
                model = build_finite_env(game, i, others, quantizers[i], samples_per_bin, rng)
            Q = value_iteration(model, tol=vi_tol).q
            gap = Q - Q.min(axis=1, keepdims=True) - deltas[i]
            mask_i[prof] = gap <= 0
            gap_i[prof] = gap
            q_i[prof] = Q
            if oracle == "mc" and bootstrap > 1:
                se_i[prof] = _bootstrap_gap_se(model, deltas[i], bootstrap, np.random.default_rng([seed, i, prof, 1]), vi_tol)
        masks.append(mask_i)
        gaps.append(gap_i)
        gap_se.append(se_i)
        qvals.append(q_i)
    provenance = "oracle-exact" if oracle == "exact" else f"mc(samples_per_bin={samples_per_bin}, seed={seed})"
    return BestReplyGraph(space, masks, provenance, deltas, gaps, gap_se if oracle == "mc" else None, qvals)


def _bootstrap_gap_se(model, delta, B, rng, tol):
    from .quantization import FiniteEnvModel

    n = max(model.samples_per_bin, 1)
    out = []
    for _ in range(B):
        C = model.cost + model.cost_se * rng.standard_normal(model.cost.shape)
        P = rng.multinomial(n, model.kernel) / n
        Q = value_iteration(FiniteEnvModel(C, P, model.beta), tol=tol).q
        out.append(Q - Q.min(axis=1, keepdims=True) - delta)
    return np.std(out, axis=0, ddof=1)


def agent_transition_row(joint: int, agent: int, graph: BestReplyGraph, psi: UpdateRule | Sequence[UpdateRule]) -> np.ndarray:
    """Distribution of agent ``agent``'s next policy from joint policy ``joint``."""
    rule = _rules(psi, graph.space.n_agents)[agent]
    space = graph.space
    pols = space.decode(joint)
    cur = pols[agent]
    mask = graph.masks[agent][space.opponent_index(agent, pols)]
    n = space.policy_counts[agent]
    row = np.zeros(n)
    M = mask.shape[0]
    if mask[np.arange(M), space.policy_actions(agent, cur)].all():
        row[cur] = 1.0
        return row
    table = space.action_table(agent)
    per_bin = mask / mask.sum(axis=1, keepdims=True)
    br = per_bin[np.arange(M), table].prod(axis=1)
    row += (1.0 - rule.inertia - rule.explore_eps) * br
    row += rule.explore_eps / n
    row[cur] += rule.inertia
    return row


@dataclass
class PolicyChain:
    """Transition matrix over joint policies plus its absorbing structure."""

    P: sp.csr_matrix
    absorbing: np.ndarray | None = None
    transient: np.ndarray | None = None
    perm: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    is_absorbing_chain: bool | None = None
    stuck: np.ndarray | None = None
    space: JointPolicySpace | None = None
    _solver: object = field(default=None, repr=False)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    def dense(self) -> np.ndarray:
        return self.P.toarray()

    def canonical(self) -> np.ndarray:
        """``P`` permuted to ``[[Q, R], [0, I]]`` form."""
        return self.P[self.perm][:, self.perm].toarray()

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "matrix": self.dense().ravel().tolist(),
            "canonical_permutation": None if self.perm is None else self.perm.tolist(),
            "absorbing": None if self.absorbing is None else self.absorbing.tolist(),
            "is_absorbing_chain": self.is_absorbing_chain,
            "cannot_reach_absorption": None if self.stuck is None else self.stuck.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def chain_from_matrix(P, space: JointPolicySpace | None = None) -> PolicyChain:
    P = sp.csr_matrix(P, dtype=float)
    P.eliminate_zeros()
    if P.shape[0] != P.shape[1]:
        raise ValueError("transition matrix must be square")
    if P.nnz and P.data.min() < 0:
        raise ValueError("transition probabilities must be non-negative")
    sums = np.asarray(P.sum(axis=1)).ravel()
    if np.any(np.abs(sums - 1.0) > 1e-12):
        raise ValueError(f"rows must sum to 1 (worst deviation {np.abs(sums - 1).max():.2e})")
    return PolicyChain(P, space=space)


def _row_support(row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.flatnonzero(row)
    return idx, row[idx]


def joint_transition_matrix(graph: BestReplyGraph, psi: UpdateRule | Sequence[UpdateRule]) -> PolicyChain:
    """Product of the agents' independent transition rows."""
    space = graph.space
    rules = _rules(psi, space.n_agents)
    counts = space.policy_counts
    strides = [math.prod(counts[i + 1:]) for i in range(space.n_agents)]
    rows, cols, vals = [], [], []
    for j in range(space.size):
        idx = np.zeros(1, dtype=np.int64)
        prob = np.ones(1)
        for i in range(space.n_agents):
            s, p = _row_support(agent_transition_row(j, i, graph, rules))
            idx = (idx[:, None] + s[None, :] * strides[i]).ravel()
            prob = (prob[:, None] * p[None, :]).ravel()
        rows.append(np.full(idx.size, j, dtype=np.int64))
        cols.append(idx)
        vals.append(prob)
    P = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(space.size, space.size)
    )
    return chain_from_matrix(P, space)


def classify_and_canonicalize(chain: PolicyChain) -> PolicyChain:
    """Find absorbing states, check reachability and extract ``Q`` and ``R``."""
    P = chain.P
    n = P.shape[0]
    absorbing = np.flatnonzero(P.diagonal() == 1.0)
    transient = np.setdiff1d(np.arange(n), absorbing)
    # reverse search over the support graph from every absorbing state
    PT = P.T.tocsr()
    reach = np.zeros(n, dtype=bool)
    reach[absorbing] = True
    queue = deque(absorbing.tolist())
    while queue:
        v = queue.popleft()
        for w in PT.indices[PT.indptr[v]:PT.indptr[v + 1]]:
            if not reach[w]:
                reach[w] = True
                queue.append(w)
    stuck = np.flatnonzero(~reach)
    Pt = P[transient]
    chain.absorbing = absorbing
    chain.transient = transient
    chain.perm = np.concatenate([transient, absorbing])
    chain.Q = Pt[:, transient]
    chain.R = Pt[:, absorbing]
    chain.is_absorbing_chain = bool(absorbing.size > 0 and stuck.size == 0)
    chain.stuck = stuck
    chain._solver = None
    return chain


def _require_absorbing(chain: PolicyChain) -> None:
    if chain.is_absorbing_chain is None:
        classify_and_canonicalize(chain)
    if not chain.is_absorbing_chain:
        raise NonAbsorbingChainError(
            f"chain is not absorbing; {chain.stuck.size} states cannot reach an absorbing state"
        )


def _solve(chain: PolicyChain, rhs) -> np.ndarray:
    """Solve ``(I - Q) X = rhs`` with a cached factorization."""
    t = chain.transient.size
    if chain._solver is None:
        A = sp.identity(t, format="csc") - chain.Q.tocsc()
        if t <= DENSE_SOLVE_LIMIT:
            lu = scipy.linalg.lu_factor(A.toarray(), check_finite=True)
            if np.any(np.diag(lu[0]) == 0):
                raise np.linalg.LinAlgError("I - Q is singular")
            chain._solver = lambda b: scipy.linalg.lu_solve(lu, b)
        else:
            chain._solver = scipy.sparse.linalg.splu(A).solve
    rhs = rhs.toarray() if sp.issparse(rhs) else np.asarray(rhs, dtype=float)
    X = chain._solver(rhs)
    if not np.all(np.isfinite(X)):
        raise np.linalg.LinAlgError("non-finite solution of (I - Q) X = b")
    return X


def absorption_probabilities(chain: PolicyChain, A0) -> np.ndarray:
    """Probability of ending at each joint policy from initial law ``A0``."""
    _require_absorbing(chain)
    A0 = np.asarray(A0, dtype=float)
    if A0.shape != (chain.n_states,) or np.any(A0 < 0) or abs(A0.sum() - 1.0) > 1e-9:
        raise ValueError("A0 must be a probability vector over the joint policy space")
    out = np.zeros(chain.n_states)
    out[chain.absorbing] = A0[chain.absorbing]
    if chain.transient.size:
        B = _solve(chain, chain.R)
        out[chain.absorbing] += A0[chain.transient] @ B
    return out


def expected_steps_to_absorption(chain: PolicyChain) -> np.ndarray:
    """Mean number of updates before absorption, one entry per transient state."""
    _require_absorbing(chain)
    if chain.transient.size == 0:
        return np.zeros(0)
    return _solve(chain, np.ones(chain.transient.size))


def limit_matrix(chain: PolicyChain) -> np.ndarray:
    """``lim P^k`` in the original state order."""
    _require_absorbing(chain)
    n = chain.n_states
    L = np.zeros((n, n))
    L[chain.absorbing, chain.absorbing] = 1.0
    if chain.transient.size:
        L[np.ix_(chain.transient, chain.absorbing)] = _solve(chain, chain.R)
    return L


def simulate_idealized(
    graph: BestReplyGraph,
    psi: UpdateRule | Sequence[UpdateRule],
    start: int,
    max_steps: int,
    rng: np.random.Generator,
) -> list[int]:
    """One trajectory of the idealized update process, stopping at equilibrium."""
    space = graph.space
    rules = _rules(psi, space.n_agents)
    traj = [int(start)]
    j = int(start)
    for _ in range(max_steps):
        if graph.is_equilibrium(j):
            break
        nxt = []
        for i in range(space.n_agents):
            cdf = np.cumsum(agent_transition_row(j, i, graph, rules))
            nxt.append(min(int(np.searchsorted(cdf, rng.random(), side="right")), cdf.size - 1))
        j = space.encode(nxt)
        traj.append(j)
    return traj


@dataclass
class AbsorptionSample:
    final: np.ndarray
    steps: np.ndarray
    absorbed: np.ndarray

    def frequencies(self, n_states: int) -> np.ndarray:
        return np.bincount(self.final, minlength=n_states) / self.final.size


def _vector_sample(cdfs: Sequence[np.ndarray], encode, is_abs: np.ndarray, start: np.ndarray,
                   max_steps: int, rng: np.random.Generator) -> AbsorptionSample:
    state = start.copy()
    steps = np.zeros(state.size, dtype=np.int64)
    active = ~is_abs[state]
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        parts = []
        for cdf in cdfs:
            c = cdf[state[idx]]
            u = rng.random(idx.size)
            parts.append(np.minimum((c <= u[:, None]).sum(axis=1), c.shape[1] - 1))
        state[idx] = encode(parts)
        steps[idx] += 1
        active[idx] = ~is_abs[state[idx]]
    return AbsorptionSample(state, steps, is_abs[state])


def sample_idealized(
    graph: BestReplyGraph,
    psi: UpdateRule | Sequence[UpdateRule],
    start: int | np.ndarray,
    episodes: int,
    max_steps: int,
    rng: np.random.Generator,
) -> AbsorptionSample:
    """Many idealized-process episodes at once, each agent moving independently."""
    space = graph.space
    rules = _rules(psi, space.n_agents)
    cdfs = []
    for i in range(space.n_agents):
        rows = np.array([agent_transition_row(j, i, graph, rules) for j in range(space.size)])
        cdfs.append(np.cumsum(rows, axis=1))
    strides = np.array([math.prod(space.policy_counts[i + 1:]) for i in range(space.n_agents)])

    def encode(parts):
        return sum(p * s for p, s in zip(parts, strides))

    is_abs = np.array([graph.is_equilibrium(j) for j in range(space.size)])
    start = np.broadcast_to(np.asarray(start, dtype=np.int64), (episodes,)).copy()
    return _vector_sample(cdfs, encode, is_abs, start, max_steps, rng)


def sample_chain(chain: PolicyChain, start: int | np.ndarray, episodes: int, max_steps: int,
                 rng: np.random.Generator) -> AbsorptionSample:
    """Many episodes of a chain given only its transition matrix."""
    cdf = np.cumsum(chain.dense(), axis=1)
    is_abs = chain.P.diagonal() == 1.0
    start = np.broadcast_to(np.asarray(start, dtype=np.int64), (episodes,)).copy()
    return _vector_sample([cdf], lambda parts: parts[0], is_abs, start, max_steps, rng)


@dataclass
class AuditReport:
    is_subjective_equilibrium: bool
    best_replying: list[bool]
    exploitability: np.ndarray
    stderr: np.ndarray
    worst_state: np.ndarray
    best_deviation: list[np.ndarray]

    def to_dict(self) -> dict:
        return {
            "is_subjective_equilibrium": self.is_subjective_equilibrium,
            "best_replying": self.best_replying,
            "exploitability": self.exploitability.tolist(),
            "stderr": self.stderr.tolist(),
            "worst_state": self.worst_state.tolist(),
            "best_deviation": [d.tolist() for d in self.best_deviation],
        }


def audit_equilibrium(
    game: GameSpec,
    joint: Sequence[QuantizedPolicy],
    graph: BestReplyGraph,
    rho: float | Sequence[float] | None = None,
    x0_grid: Sequence[float] | None = None,
    episodes: int = 400,
    truncation_tol: float = 1e-3,
    seed: int = 0,
) -> AuditReport:
    """Subjective best-reply check plus Monte Carlo exploitability per agent.

    Exploitability of agent ``i`` is ``max_x0 [J(pi) - J(best deviation)]``.
    The best deviation is selected on one batch of common random numbers
    and its gain re-estimated on a fresh batch, so the reported value is
    not biased upward by the selection.  All agents play their
    rho-perturbed policies when ``rho`` is given.
    """
    N = game.n_agents
    space = graph.space
    jidx = space.encode_actions([p.actions for p in joint])
    br = [graph.contains(i, jidx) for i in range(N)]
    rhos = [None] * N if rho is None else ([float(r) for r in rho] if np.ndim(rho) else [float(rho)] * N)
    if x0_grid is None:
        x0_grid = joint[0].quantizer.representatives
    x0_grid = [float(x) for x in x0_grid]
    H = max(required_horizon(b, game.c_max, truncation_tol) for b in game.discounts)

    def wrap(p: QuantizedPolicy, r):
        return p if r is None else PerturbedPolicy(p, r)

    exploit = np.zeros(N)
    stderr = np.zeros(N)
    worst = np.zeros(N)
    best_dev = []
    for i in range(N):
        table = space.action_table(i)
        others = [wrap(p, rhos[k]) for k, p in enumerate(joint)]
        per_state = []
        for s, x0 in enumerate(x0_grid):
            sel_seed = [seed, i, s, 0]
            means = np.empty(len(table))
            for p, acts in enumerate(table):
                pols = list(others)
                pols[i] = wrap(QuantizedPolicy(i, joint[i].quantizer, acts), rhos[i])
                ev = evaluate_joint_policy(game, pols, x0, H, episodes, np.random.default_rng(sel_seed))
                means[p] = ev.mean[i]
            dev = table[int(np.argmin(means))]
            pols = list(others)
            pols[i] = wrap(QuantizedPolicy(i, joint[i].quantizer, dev), rhos[i])
            fresh = [seed, i, s, 1]
            cur = evaluate_joint_policy(game, others, x0, H, episodes, np.random.default_rng(fresh)).returns[:, i]
            alt = evaluate_joint_policy(game, pols, x0, H, episodes, np.random.default_rng(fresh)).returns[:, i]
            diff = cur - alt
            per_state.append((diff.mean(), diff.std(ddof=1) / np.sqrt(episodes), x0, dev))
        k = int(np.argmax([d[0] for d in per_state]))
        exploit[i], stderr[i], worst[i], dev = per_state[k]
        best_dev.append(dev)
    return AuditReport(all(br), br, exploit, stderr, worst, best_dev)
