"""Command-line entry point.

Subcommands: verify (decoupling suites), sweep (contamination grid), train,
eval, replay, serve.  Exit codes: 0 success, 1 validation error, 2 runtime
failure.  The last stdout line is always a machine-readable JSON summary.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .instructions import ConfigError


def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return json.load(f)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True, default=float))


def cmd_verify(args) -> int:
    from . import exact
    from .envs import build_env

    cfg = _load_config(args.config)
    tol = float(cfg.get("tolerance", 1e-6))
    n_random = int(cfg.get("random_instances", 20))
    env = build_env(cfg.get("env", "chain"), cfg.get("env_config", {}))
    spec = env.tabular_spec()
    M = exact.from_spec(spec)
    report = exact.verify_decoupling(M, tol=tol)
    worst_lemma = report["lemma1_max_dev"]
    worst_theorem = report["theorem1_max_dev"]
    all_pass = report["lemma1_pass"] and report["theorem1_pass"]
    randoms = []
    base_seed = int(cfg.get("seed", args.seed or 0))
    for k in range(n_random):
        Mk = exact.random_instance(base_seed + k)
        rk = exact.verify_decoupling(Mk, tol=tol, instance_seed=base_seed + k)
        randoms.append(rk)
        worst_lemma = max(worst_lemma, rk["lemma1_max_dev"])
        worst_theorem = max(worst_theorem, rk["theorem1_max_dev"])
        all_pass = all_pass and rk["lemma1_pass"] and rk["theorem1_pass"]
    out = {
        "command": "verify",
        "status": "ok" if all_pass else "failed",
        "lemma1_max_dev": worst_lemma,
        "theorem1_max_dev": worst_theorem,
        "theorem1_pass": all_pass,
        "instances": 1 + n_random,
        "iterations": report["iterations"],
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        exact.write_verification_report(
            {"chain": report, "random": randoms},
            os.path.join(args.out, "verification.json"))
        out["report"] = os.path.join(args.out, "verification.json")
    _emit(out)
    return 0 if all_pass else 2


def cmd_sweep(args) -> int:
    from . import exact
    from .envs import build_env

    cfg = _load_config(args.config)
    beta_grid = cfg.get("beta_grid", [0.2, 0.3, 0.45])
    penalty_grid = cfg.get("penalty_grid", [12.0, 25.0, 50.0])
    env_config = cfg.get("env_config", {})
    certify = bool(cfg.get("certify", False))

    def make_spec(beta, penalty):
        return build_env("chain", {**env_config, "arrival_prob": beta,
                                   "penalty": penalty}).tabular_spec()

    out_dir = args.out or "sweep_out"
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "sweep.csv")
    rows = exact.contamination_sweep(make_spec, beta_grid, penalty_grid,
                                     out_csv=csv_path, certify=certify)
    certified = [r for r in rows
                 if r.get("certificate", {}).get("all_optimal_fail")]
    _emit({
        "command": "sweep",
        "status": "ok",
        "csv": csv_path,
        "points": len(rows),
        "certified_points": len(certified),
    })
    return 0


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    cfg = _load_config(args.config)
    if args.mode:
        cfg["mode"] = args.mode
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out_dir"] = args.out
    config = TrainConfig.from_dict(cfg)
    result = train(config)
    _emit({
        "command": "train",
        "status": "ok",
        "checkpoint": result.checkpoint_path,
        "metrics": result.metrics_path,
        "final": result.final_metrics,
    })
    return 0


def cmd_eval(args) -> int:
    from . import harness
    from .envs import build_env
    from .training import load_checkpoint

    cfg = _load_config(args.config)
    lp = load_checkpoint(args.checkpoint)
    env_name = cfg.get("env", lp.env_name)
    if env_name != lp.env_name:
        raise ConfigError(f"checkpoint is for env {lp.env_name!r}, not "
                          f"{env_name!r}")
    env = build_env(lp.env_name, lp.env_config)
    macro_sets = [env.macro_actions(i) for i in range(env.agent_count)]
    episodes = int(cfg.get("episodes", args.episodes))
    seed = args.seed if args.seed is not None else 0
    base = harness.eval_base(env, macro_sets, lp.policy(env),
                             episodes, seed=seed, window=lp.window)
    compl = harness.eval_compliance(
        env, macro_sets, lp.policy(env, greedy=True), episodes,
        seed=seed + 1, window=lp.window,
        arrival_prob=cfg.get("arrival_prob"))
    out_dir = args.out
    if out_dir:
        rows = [{"env": lp.env_name, "mode": lp.mode,
                 "base_mean": base["mean"], "base_std": base["std"],
                 "compliance": compl["compliance"], "compliance_std": ""}]
        comp_rows = [{
            "env": lp.env_name, "mode": lp.mode, "class_id": cid,
            "class_name": env.instruction_registry[cid].name,
            "issued": rec.issued, "followed": rec.followed,
            "violated": rec.violated, "pending": rec.pending,
        } for cid, rec in sorted(compl["records"].items())]
        harness.report(rows, comp_rows, [], out_dir)
    _emit({
        "command": "eval",
        "status": "ok",
        "base_return": base["mean"],
        "base_std": base["std"],
        "compliance": compl["compliance"],
        "issued": compl["issued"],
    })
    return 0


def cmd_replay(args) -> int:
    from .engine import load_trace

    records = load_trace(args.trace)
    if not records:
        raise ConfigError(f"empty trace: {args.trace}")
    ts = [r["t"] for r in records]
    if ts != sorted(ts):
        raise ConfigError("trace steps are not in order")
    total = sum(r["reward"] for r in records)
    classes = {r["active_instruction"]["class_id"] for r in records}
    _emit({
        "command": "replay",
        "status": "ok",
        "steps": len(records),
        "undiscounted_return": total,
        "segments": len({r["segment_id"] for r in records}),
        "instruction_classes_seen": sorted(classes),
    })
    return 0


def cmd_serve(args) -> int:
    from .bridge import BridgeServer

    server = BridgeServer(host=args.host, port=args.port,
                          static_dir=args.static)
    _emit({
        "command": "serve",
        "status": "ok",
        "host": args.host,
        "port": server.port,
    })
    server.serve_forever()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--mode", default=None,
                        choices=["mavic", "naive", "switch", "vanilla"])
    p = argparse.ArgumentParser(prog="macrl", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("verify", parents=[common])
    sub.add_parser("sweep", parents=[common])
    sub.add_parser("train", parents=[common])
    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    rp = sub.add_parser("replay", parents=[common])
    rp.add_argument("trace")
    sv = sub.add_parser("serve", parents=[common])
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8765)
    sv.add_argument("--static", default=None)
    return p


COMMANDS = {
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "eval": cmd_eval,
    "replay": cmd_replay,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as e:
        _emit({"command": args.command, "status": "error", "error": str(e)})
        return 1
    except Exception as e:  # runtime failure
        _emit({"command": args.command, "status": "error", "error": repr(e)})
        return 2


if __name__ == "__main__":
    sys.exit(main())
