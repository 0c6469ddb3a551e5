"""``qmarl`` command line.

    qmarl reproduce         run the team-game simulation study
    qmarl analyze-dynamics  best-reply graph, policy chain and absorption report
    qmarl solve-env         oracle Q-table for one frozen-opponent environment

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 enumeration
cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, load_config
from .dynamics import (
    CapExceededError,
    NonAbsorbingChainError,
    UpdateRule,
    absorption_probabilities,
    audit_equilibrium,
    build_best_reply_graph,
    classify_and_canonicalize,
    expected_steps_to_absorption,
    joint_transition_matrix,
)
from .experiments import (
    ExperimentConfig,
    emit_plot_data,
    read_plot_data,
    run_experiment,
    write_aggregate_csv,
    write_trials_csv,
)
from .game_model import PerturbedPolicy, QuantizedPolicy
from .quantization import EmptyBinError, ValueIterationError, build_finite_env, uniform_quantizer, value_iteration

log = logging.getLogger("qmarl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4


def _apply_overrides(cfg: dict, args) -> dict:
    exp = cfg["experiment"]
    if args.seed is not None:
        exp["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        exp["threads"] = args.threads
    if getattr(args, "trials", None) is not None:
        exp["trials"] = args.trials
    if getattr(args, "T", None) is not None:
        exp["T"] = list(args.T)
    if getattr(args, "phases", None) is not None:
        exp["phases"] = args.phases
    return cfg


def experiment_config(cfg: dict) -> ExperimentConfig:
    learner, exp = cfg["learner"], cfg["experiment"]
    try:
        return ExperimentConfig(
            game=dict(cfg["game"]),
            n_bins=learner["n_bins"],
            rho=learner["rho"],
            delta=learner["delta"],
            q_reset=learner["q_reset"],
            inertia=learner["inertia"],
            explore_eps=learner["explore_eps"],
            T_values=exp["T"],
            trials=exp["trials"],
            phases=exp["phases"],
            init=exp["init"],
            x0=exp["x0"],
            seed=exp["seed"],
            threads=exp["threads"],
        )
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e


def _write_manifest(out: Path, command: str, cfg: dict, outputs: list[Path], timing: dict) -> Path:
    path = out / "manifest.json"
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["experiment"]["seed"],
        "outputs": sorted(str(p.name) for p in outputs + [path]),
        "timing": timing,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def cmd_reproduce(cfg: dict, out: Path) -> int:
    ecfg = experiment_config(cfg)
    start = time.perf_counter()
    result = run_experiment(ecfg, progress=lambda T, s: log.info("T=%d done in %.1fs", T, s))
    files = [out / "trials.csv", out / "aggregate.csv", out / "plot_data.csv", out / "optimal_fraction.png"]
    write_trials_csv(result, files[0])
    write_aggregate_csv(result.aggregate, files[1])
    text = emit_plot_data(result.aggregate, files[2])
    from .plotting import plot_optimal_fraction

    plot_optimal_fraction(read_plot_data(text), files[3])
    timing = {"wall_clock": time.perf_counter() - start, "per_T": {str(T): s for T, s in result.runtimes.items()}}
    _write_manifest(out, "reproduce", cfg, files, timing)
    for T in ecfg.T_values:
        fr = [result.fraction(T, k) for k in range(ecfg.phases)]
        print(f"T={T:<8d} " + " ".join(f"{f:.2f}" for f in fr))
    return EXIT_OK


def _dynamics_inputs(cfg: dict):
    ecfg = experiment_config(cfg)
    game = ecfg.build_game()
    learners = ecfg.learners()
    return ecfg, game, learners


def cmd_analyze_dynamics(cfg: dict, out: Path, chain_report: bool) -> int:
    dyn = cfg["dynamics"]
    ecfg, game, learners = _dynamics_inputs(cfg)
    if dyn["oracle"] not in ("mc", "exact"):
        raise ConfigError(f"[dynamics] oracle must be 'mc' or 'exact', got {dyn['oracle']!r}")
    if dyn["start"] not in ("anti", "uniform"):
        raise ConfigError(f"[dynamics] start must be 'anti' or 'uniform', got {dyn['start']!r}")
    start = time.perf_counter()
    qs = [c.quantizer for c in learners]
    graph = build_best_reply_graph(
        game, qs, [c.rho for c in learners], [c.delta for c in learners], oracle=dyn["oracle"],
        samples_per_bin=dyn["samples_per_bin"], seed=ecfg.seed, bootstrap=dyn["bootstrap"],
    )
    psi = [UpdateRule(c.inertia, c.explore_eps) for c in learners]
    chain = classify_and_canonicalize(joint_transition_matrix(graph, psi))
    space = graph.space
    report = {
        "n_joint_policies": space.size,
        "is_absorbing_chain": chain.is_absorbing_chain,
        "absorbing": [_describe(space, j) for j in chain.absorbing],
        "cannot_reach_absorption": [_describe(space, j) for j in chain.stuck],
        "flagged_cells": graph.flagged_cells(),
        "provenance": graph.provenance,
    }
    if dyn["start"] == "anti":
        A0 = np.zeros(space.size)
        A0[space.encode_actions([np.full(q.n_bins, 1 if i == 0 else 0) for i, q in enumerate(qs)])] = 1.0
    else:
        A0 = np.full(space.size, 1.0 / space.size)
    if chain.is_absorbing_chain:
        probs = absorption_probabilities(chain, A0)
        steps = expected_steps_to_absorption(chain)
        report["start"] = dyn["start"]
        report["absorption"] = {str(j): float(probs[j]) for j in np.flatnonzero(probs > 0)}
        report["expected_steps"] = {str(j): float(s) for j, s in zip(chain.transient, steps)}
        report["expected_steps_from_start"] = float(A0[chain.transient] @ steps) if steps.size else 0.0
    if dyn["audit"]:
        audits = {}
        for j in chain.absorbing:
            joint = [QuantizedPolicy(i, qs[i], space.policy_actions(i, p)) for i, p in enumerate(space.decode(j))]
            rep = audit_equilibrium(game, joint, graph, rho=[c.rho for c in learners],
                                    episodes=dyn["audit_episodes"], seed=ecfg.seed)
            audits[str(j)] = rep.to_dict()
        report["audit"] = audits
    files = [out / "graph.json", out / "chain.json", out / "report.json", out / "report.txt"]
    files[0].write_text(json.dumps(graph.to_dict()))
    files[1].write_text(chain.to_json())
    files[2].write_text(json.dumps(report, indent=2))
    table = _chain_table(report)
    files[3].write_text(table)
    _write_manifest(out, "analyze-dynamics", cfg, files, {"wall_clock": time.perf_counter() - start})
    if chain_report:
        print(table, end="")
        print(json.dumps({k: report[k] for k in ("is_absorbing_chain", "absorbing", "cannot_reach_absorption")}))
    else:
        print(f"absorbing chain: {chain.is_absorbing_chain}; {len(chain.absorbing)} absorbing joint policies")
    return EXIT_OK


def _describe(space, j) -> dict:
    pols = space.decode(int(j))
    return {"index": int(j), "actions": [space.policy_actions(i, p).tolist() for i, p in enumerate(pols)]}


def _chain_table(report: dict) -> str:
    lines = [
        f"joint policies       {report['n_joint_policies']}",
        f"absorbing chain      {report['is_absorbing_chain']}",
        f"absorbing states     {len(report['absorbing'])}",
        f"cannot reach absorb  {len(report['cannot_reach_absorption'])}",
        f"flagged BR cells     {len(report['flagged_cells'])}",
    ]
    if "absorption" in report:
        lines.append(f"expected steps from {report['start']} start: {report['expected_steps_from_start']:.4f}")
        lines.append("")
        lines.append(f"{'index':>8}  {'probability':>11}  actions")
        by_index = {d["index"]: d["actions"] for d in report["absorbing"]}
        for j, p in sorted(report["absorption"].items(), key=lambda kv: -kv[1]):
            lines.append(f"{j:>8}  {p:>11.6f}  {by_index[int(j)]}")
    if report["cannot_reach_absorption"]:
        lines.append("")
        lines.append("states that cannot reach an absorbing state:")
        for d in report["cannot_reach_absorption"]:
            lines.append(f"{d['index']:>8}  {d['actions']}")
    return "\n".join(lines) + "\n"


def cmd_solve_env(cfg: dict, out: Path) -> int:
    env = cfg["solve_env"]
    ecfg, game, learners = _dynamics_inputs(cfg)
    agent = env["agent"]
    if not 0 <= agent < game.n_agents:
        raise ConfigError(f"[solve_env] agent must be in [0, {game.n_agents})")
    if len(env["opponents"]) != game.n_agents - 1:
        raise ConfigError("[solve_env] opponents needs one action list per other agent")
    try:
        q = uniform_quantizer(game.lo, game.hi, env["n_bins"])
        others: list = [None] * game.n_agents
        opp = iter(env["opponents"])
        for k in range(game.n_agents):
            if k != agent:
                others[k] = PerturbedPolicy(QuantizedPolicy(k, learners[k].quantizer, next(opp)), learners[k].rho)
    except ValueError as e:
        raise ConfigError(f"[solve_env] {e}") from e
    start = time.perf_counter()
    rng = np.random.default_rng(ecfg.seed)
    model = build_finite_env(game, agent, others, q, env["samples_per_bin"], rng)
    res = value_iteration(model, tol=env["tol"], max_iters=env["max_iters"])
    files = [out / "env_model.json", out / "q_table.json"]
    model.save(files[0])
    files[1].write_text(json.dumps({
        "q": res.q.tolist(),
        "greedy": res.greedy().tolist(),
        "bellman_residual": res.residual,
        "iterations": res.iterations,
    }, indent=2))
    _write_manifest(out, "solve-env", cfg, files, {"wall_clock": time.perf_counter() - start})
    print(f"greedy policy {res.greedy().tolist()}  residual {res.residual:.2e} after {res.iterations} iterations")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config or a manifest.json from an earlier run")
    common.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qmarl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qmarl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    rep = sub.add_parser("reproduce", parents=[common], help="run the simulation study")
    rep.add_argument("--threads", type=int)
    rep.add_argument("--trials", type=int)
    rep.add_argument("--T", type=int, nargs="+", help="exploration phase lengths")
    rep.add_argument("--phases", type=int, help="tracked phases per trial")
    dyn = sub.add_parser("analyze-dynamics", parents=[common], help="policy-chain analysis")
    dyn.add_argument("--chain-report", action="store_true", help="print the absorption table and JSON summary")
    sub.add_parser("solve-env", parents=[common], help="oracle Q-table for one environment")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        out = args.out
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"cannot create output directory {out}: {e.strerror}") from e
        if args.command == "reproduce":
            return cmd_reproduce(cfg, out)
        if args.command == "analyze-dynamics":
            return cmd_analyze_dynamics(cfg, out, args.chain_report)
        return cmd_solve_env(cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CapExceededError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAP
    except (ValueIterationError, NonAbsorbingChainError, EmptyBinError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
