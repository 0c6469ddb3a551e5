"""TOML run configuration with full defaulting.

Every command reads one file with the tables below; anything left out is
filled from the defaults and the resolved result is echoed into the run
manifest.  A previously written manifest (JSON with a ``config`` key) is
accepted in place of a TOML file, which is how runs are replayed.

    [game]        name, n_agents, step, noise_prob, noise_scale, discount
    [learner]     n_bins, rho, delta, q_reset, inertia, explore_eps
    [experiment]  T, trials, phases, init, x0, seed, threads
    [dynamics]    oracle, samples_per_bin, bootstrap, start, audit, audit_episodes
    [solve_env]   agent, opponents, n_bins, samples_per_bin, tol, max_iters
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "DEFAULTS", "load_config", "resolve", "config_hash"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "game": {"name": "team", "n_agents": 2, "step": 0.1, "noise_prob": 0.1, "noise_scale": 0.1, "discount": 0.8},
    "learner": {
        "n_bins": 5,
        "rho": 0.05,
        "delta": 0.01,
        "q_reset": 0.0,
        "inertia": [0.25, 0.75],
        "explore_eps": [0.0, 0.0],
    },
    "experiment": {
        "T": [100, 1000, 10_000, 100_000],
        "trials": 50,
        "phases": 10,
        "init": "anti",
        "x0": "uniform",
        "seed": 0,
        "threads": 1,
    },
    "dynamics": {
        "oracle": "mc",
        "samples_per_bin": 20_000,
        "bootstrap": 20,
        "start": "anti",
        "audit": False,
        "audit_episodes": 200,
    },
    "solve_env": {
        "agent": 0,
        "opponents": [[1, 1, 1, 1, 1]],
        "n_bins": 5,
        "samples_per_bin": 20_000,
        "tol": 1e-10,
        "max_iters": 100_000,
    },
}

_TYPES = {
    int: (int,),
    float: (int, float),
    str: (str,),
    bool: (bool,),
    list: (list,),
}


def _line_of(text: str, key: str) -> int | None:
    for n, line in enumerate(text.splitlines(), 1):
        if line.split("=")[0].strip() == key or line.strip() == f"[{key}]":
            return n
    return None


def _check(section: str, key: str, value, default, where) -> None:
    if key == "T" and isinstance(value, int) and not isinstance(value, bool):
        return
    if key == "x0" and (isinstance(value, (int, float)) and not isinstance(value, bool)):
        return
    kinds = _TYPES[type(default)]
    ok = isinstance(value, kinds) and not (isinstance(value, bool) and bool not in kinds)
    if not ok:
        raise ConfigError(f"{where(key)}[{section}] {key}: expected {type(default).__name__}, got {type(value).__name__}")


def resolve(user: dict, text: str = "", source: str = "<config>") -> dict:
    """Merge ``user`` over the defaults, rejecting unknown tables and keys."""

    def where(key):
        n = _line_of(text, key)
        return f"{source}:{n}: " if n else f"{source}: "

    out = copy.deepcopy(DEFAULTS)
    for section, table in user.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{where(section)}unknown table [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"{where(section)}[{section}] must be a table")
        for key, value in table.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where(key)}unknown key {key!r} in [{section}]")
            _check(section, key, value, DEFAULTS[section][key], where)
            out[section][key] = value
    if isinstance(out["experiment"]["T"], int):
        out["experiment"]["T"] = [out["experiment"]["T"]]
    return out


def load_config(path: str | Path | None) -> dict:
    """Resolved config from a TOML file, a manifest JSON, or ``None`` for defaults."""
    if path is None:
        return resolve({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: {e.msg}") from e
        return resolve(data.get("config", data), source=str(path))
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return resolve(data, text, str(path))


def config_hash(cfg: dict) -> str:
    """Git blob hash of the canonical JSON form."""
    body = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()
