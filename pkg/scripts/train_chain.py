#!/usr/bin/env python3
"""Train all four modes on ChainSwitch across seeds and print a report."""

import argparse

from macrl import harness
from macrl.envs import build_env
from macrl.training import TrainConfig, load_checkpoint, train

CHAIN = dict(env="chain", epochs=60, episodes_per_epoch=16, updates_per_epoch=20,
             buffer_capacity=1024, window=2, explore_eps=0.15, entropy_coef=0.03,
             lr_actor=0.05, lr_critic=0.25, eval_every=100, eval_episodes=1)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--modes", nargs="+",
                    default=["mavic", "naive", "switch", "vanilla"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--out", default="runs/chain")
    args = ap.parse_args()

    env = build_env("chain")
    macro_sets = [env.macro_actions(0)]
    rows = []
    for mode in args.modes:
        bases, compls = [], []
        for seed in args.seeds:
            cfg = TrainConfig.from_dict({**CHAIN, "mode": mode, "seed": seed,
                                         "out_dir": args.out})
            result = train(cfg)
            lp = load_checkpoint(result.checkpoint_path)
            base = harness.eval_base(env, macro_sets, lp.policy(env), 100,
                                     seed=seed * 31, window=lp.window)
            compl = harness.eval_compliance(env, macro_sets, lp.policy(env),
                                            300, seed=seed * 37, window=lp.window)
            bases.append(base["mean"])
            compls.append(compl["compliance"])
            print(f"{mode} seed {seed}: base={base['mean']:.1f} "
                  f"compliance={compl['compliance']}")
        rows.append({
            "env": "chain", "mode": mode,
            "base_mean": harness.aggregate(bases)["mean"],
            "base_std": harness.aggregate(bases)["std"],
            "compliance": harness.aggregate(compls)["mean"],
            "compliance_std": harness.aggregate(compls)["std"],
        })
    paths = harness.report(rows, [], [], args.out)
    print("report:", paths["results"])


if __name__ == "__main__":
    main()
