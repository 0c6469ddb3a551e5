"""Inner simulation loops.

Each loop is written once as plain Python and compiled with numba on first
use when the game's kernel and cost are themselves jitted.  Both versions
perform the same floating-point operations in the same order, so results
are bit-identical whichever one runs.

Per-step uniform draws are laid out as
``[explore_0 .. explore_{N-1}, action_0 .. action_{N-1}, noise_0 ..]``.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numba
import numpy as np
from numba.extending import is_jitted


@numba.njit(cache=True)
def bin_index(cuts, n_cuts, x):
    # number of cuts strictly below x: boundary points go to the lower bin
    lo = 0
    hi = n_cuts
    while lo < hi:
        mid = (lo + hi) // 2
        if cuts[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


@numba.njit(cache=True)
def choose_action(base, rho, explore_draw, action_draw, n_actions):
    if explore_draw < rho:
        a = int(action_draw * n_actions)
        return a if a < n_actions else n_actions - 1
    return base


class Packed(NamedTuple):
    cuts: np.ndarray
    n_cuts: np.ndarray
    policies: np.ndarray
    n_actions: np.ndarray
    action_values: np.ndarray
    rho: np.ndarray


def pack_policies(game, perturbed: Sequence) -> Packed:
    """Pad per-agent quantizers and policies into rectangular arrays."""
    N = game.n_agents
    if len(perturbed) != N:
        raise ValueError("one policy per agent")
    max_m = max(p.base.quantizer.n_bins for p in perturbed)
    max_u = max(game.n_actions(i) for i in range(N))
    cuts = np.zeros((N, max(max_m - 1, 1)))
    n_cuts = np.zeros(N, dtype=np.int64)
    policies = np.zeros((N, max_m), dtype=np.int64)
    n_actions = np.array([game.n_actions(i) for i in range(N)], dtype=np.int64)
    values = np.zeros((N, max_u))
    rho = np.zeros(N)
    for i, p in enumerate(perturbed):
        q = p.base.quantizer
        if np.any(p.base.actions >= n_actions[i]):
            raise ValueError(f"policy for agent {i} uses an action index outside its action set")
        cuts[i, : q.n_bins - 1] = q.cuts
        n_cuts[i] = q.n_bins - 1
        policies[i, : q.n_bins] = p.base.actions
        values[i, : n_actions[i]] = game.action_sets[i]
        rho[i] = p.rho
    return Packed(cuts, n_cuts, policies, n_actions, values, rho)


def phase_loop(kernel, cost, params, x, draws, betas, cuts, n_cuts, policies,
               n_actions, action_values, rho, n_agents, Q, visits):
    N = n_agents
    u = np.empty(N)
    acts = np.empty(N, dtype=np.int64)
    ys = np.empty(N, dtype=np.int64)
    for t in range(draws.shape[0]):
        row = draws[t]
        for i in range(N):
            y = bin_index(cuts[i], n_cuts[i], x)
            ys[i] = y
            a = choose_action(policies[i, y], rho[i], row[i], row[N + i], n_actions[i])
            acts[i] = a
            u[i] = action_values[i, a]
        x_next = kernel(x, u, row[2 * N:], params)
        for i in range(N):
            c = cost(i, x, u, params)
            y2 = bin_index(cuts[i], n_cuts[i], x_next)
            m = Q[i, y2, 0]
            for v in range(1, n_actions[i]):
                if Q[i, y2, v] < m:
                    m = Q[i, y2, v]
            y = ys[i]
            a = acts[i]
            visits[i, y, a] += 1
            alpha = 1.0 / (1.0 + visits[i, y, a])
            Q[i, y, a] = (1.0 - alpha) * Q[i, y, a] + alpha * (c + betas[i] * m)
        x = x_next
    return x


def eval_loop(kernel, cost, params, x0s, draws, betas, cuts, n_cuts, policies,
              n_actions, action_values, rho, n_agents):
    N = n_agents
    n_ep = draws.shape[0]
    H = draws.shape[1]
    out = np.zeros((n_ep, N))
    u = np.empty(N)
    disc = np.empty(N)
    for e in range(n_ep):
        x = x0s[e]
        for i in range(N):
            disc[i] = 1.0
        for t in range(H):
            row = draws[e, t]
            for i in range(N):
                y = bin_index(cuts[i], n_cuts[i], x)
                a = choose_action(policies[i, y], rho[i], row[i], row[N + i], n_actions[i])
                u[i] = action_values[i, a]
            for i in range(N):
                out[e, i] += disc[i] * cost(i, x, u, params)
                disc[i] *= betas[i]
            x = kernel(x, u, row[2 * N:], params)
    return out


def env_sample_loop(kernel, cost, params, agent, own_action, xs, draws, cuts,
                    n_cuts, policies, n_actions, action_values, rho, n_agents):
    N = n_agents
    n = xs.shape[0]
    costs = np.empty(n)
    nxt = np.empty(n, dtype=np.int64)
    u = np.empty(N)
    for k in range(n):
        x = xs[k]
        row = draws[k]
        for j in range(N):
            if j == agent:
                a = own_action
            else:
                y = bin_index(cuts[j], n_cuts[j], x)
                a = choose_action(policies[j, y], rho[j], row[j], row[N + j], n_actions[j])
            u[j] = action_values[j, a]
        costs[k] = cost(agent, x, u, params)
        x_next = kernel(x, u, row[2 * N:], params)
        nxt[k] = bin_index(cuts[agent], n_cuts[agent], x_next)
    return costs, nxt


_compiled: dict = {}


def select(loop, game):
    """Compiled ``loop`` if the game's callables are jitted, else ``loop``."""
    if not (is_jitted(game.kernel) and is_jitted(game.cost)):
        return loop
    fn = _compiled.get(loop.__name__)
    if fn is None:
        fn = _compiled[loop.__name__] = numba.njit(loop)
    return fn


def path_loop(kernel, cost, params, x, draws, cuts, n_cuts, policies,
              n_actions, action_values, rho, n_agents):
    N = n_agents
    n = draws.shape[0]
    xs = np.empty(n + 1)
    xs[0] = x
    u = np.empty(N)
    for t in range(n):
        row = draws[t]
        for i in range(N):
            y = bin_index(cuts[i], n_cuts[i], x)
            a = choose_action(policies[i, y], rho[i], row[i], row[N + i], n_actions[i])
            u[i] = action_values[i, a]
        x = kernel(x, u, row[2 * N:], params)
        xs[t + 1] = x
    return xs
