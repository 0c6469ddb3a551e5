"""Built-in games: the two-player drift team on [0, 1] and embedded finite games."""

from __future__ import annotations

from typing import Sequence

import numba
import numpy as np

from .game_model import FiniteTables, GameSpec

__all__ = ["build_team_game", "finite_game", "TEAM_DEFAULTS"]

TEAM_DEFAULTS = {
    "step": 0.1,
    "noise_prob": 0.1,
    "noise_scale": 0.1,
    "discount": 0.8,
}


@numba.njit(cache=True)
def _team_kernel(x, u, w, params):
    prod = 1.0
    for i in range(u.shape[0]):
        prod *= u[i]
    xi = 1.0 if w[0] < params[1] else 0.0
    nu = 2.0 * w[1] - 1.0
    y = x + params[0] * prod + params[2] * xi * nu
    if y < 0.0:
        return 0.0
    if y > 1.0:
        return 1.0
    return y


@numba.njit(cache=True)
def _team_cost(i, x, u, params):
    return -x


def build_team_game(
    step: float = 0.1,
    noise_prob: float = 0.1,
    noise_scale: float = 0.1,
    discount: float | Sequence[float] = 0.8,
    n_agents: int = 2,
) -> GameSpec:
    """Team on [0, 1]: ``x' = clip(x + step*u1*u2 + noise_scale*xi*nu)``.

    ``xi ~ Bernoulli(noise_prob)``, ``nu ~ Uniform(-1, 1)``, actions
    ``{-1, +1}`` and every agent pays ``-x``.
    """
    if step < 0 or noise_scale < 0:
        raise ValueError("step and noise_scale must be non-negative")
    if not 0.0 <= noise_prob <= 1.0:
        raise ValueError("noise_prob must lie in [0, 1]")
    if n_agents < 1:
        raise ValueError("need at least one agent")
    discounts = tuple(discount) if np.ndim(discount) else (float(discount),) * n_agents
    return GameSpec(
        name="team",
        n_agents=n_agents,
        lo=0.0,
        hi=1.0,
        action_sets=tuple(np.array([-1.0, 1.0]) for _ in range(n_agents)),
        kernel=_team_kernel,
        cost=_team_cost,
        noise_dim=2,
        discounts=discounts,
        c_max=1.0,
        params=np.array([step, noise_prob, noise_scale]),
    )


@numba.njit(cache=True)
def _finite_kernel(x, u, w, params):
    m = int(params[0])
    N = int(params[1])
    J = 1
    j = 0
    for i in range(N):
        n_i = int(params[2 + i])
        j = j * n_i + int(u[i])
        J *= n_i
    s = int(x + 0.5)
    base = 2 + N + (s * J + j) * m
    r = w[0]
    for k in range(m - 1):
        if r < params[base + k]:
            return float(k)
    return float(m - 1)


@numba.njit(cache=True)
def _finite_cost(i, x, u, params):
    m = int(params[0])
    N = int(params[1])
    J = 1
    j = 0
    for k in range(N):
        n_k = int(params[2 + k])
        j = j * n_k + int(u[k])
        J *= n_k
    s = int(x + 0.5)
    off = 2 + N + m * J * m
    return params[off + (i * m + s) * J + j]


def finite_game(
    kernel: np.ndarray,
    cost: np.ndarray,
    action_counts: Sequence[int],
    discount: float | Sequence[float],
    name: str = "finite",
) -> GameSpec:
    """Embed a finite game with states ``0..m-1`` in the interval ``[0, m-1]``.

    ``kernel`` is ``(m, J, m)`` (or an ``(m, J)`` integer next-state table
    for deterministic games) and ``cost`` is ``(N, m, J)``, where ``J`` is
    the number of joint actions, indexed mixed-radix with agent 0 most
    significant.  Actions are the indices ``0..n_i-1``.
    """
    counts = tuple(int(n) for n in action_counts)
    N = len(counts)
    J = int(np.prod(counts))
    kernel = np.asarray(kernel)
    if kernel.ndim == 2:
        m = kernel.shape[0]
        det = np.zeros((m, J, m))
        det[np.arange(m)[:, None], np.arange(J)[None, :], kernel.astype(int)] = 1.0
        kernel = det
    kernel = np.asarray(kernel, dtype=float)
    m = kernel.shape[0]
    cost = np.asarray(cost, dtype=float)
    if kernel.shape != (m, J, m):
        raise ValueError(f"kernel must have shape {(m, J, m)}, got {kernel.shape}")
    if cost.shape != (N, m, J):
        raise ValueError(f"cost must have shape {(N, m, J)}, got {cost.shape}")
    if np.any(kernel < 0) or np.any(np.abs(kernel.sum(axis=2) - 1.0) > 1e-12):
        raise ValueError("kernel rows must be probability vectors")
    cum = np.cumsum(kernel, axis=2)
    params = np.concatenate([[m, N], counts, cum.ravel(), cost.ravel()]).astype(float)
    discounts = tuple(discount) if np.ndim(discount) else (float(discount),) * N
    c_max = float(np.max(np.abs(cost))) or 1.0
    return GameSpec(
        name=name,
        n_agents=N,
        lo=0.0,
        hi=float(max(m - 1, 1)),
        action_sets=tuple(np.arange(n, dtype=float) for n in counts),
        kernel=_finite_kernel,
        cost=_finite_cost,
        noise_dim=1,
        discounts=discounts,
        c_max=c_max,
        params=params,
        states=np.arange(m, dtype=float),
        tables=FiniteTables(kernel, cost, counts),
    )
