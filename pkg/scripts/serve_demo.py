#!/usr/bin/env python3
"""Train a quick ChainSwitch policy (if needed) and serve it live."""

import argparse
import os

from macrl.bridge import BridgeServer
from macrl.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--checkpoint", default="runs/demo/checkpoint_chain_mavic_seed1.json")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--static", default="frontend/dist")
    args = ap.parse_args()

    if not os.path.exists(args.checkpoint):
        print("training a demo checkpoint ...")
        cfg = TrainConfig(env="chain", mode="mavic", seed=1, epochs=60,
                          episodes_per_epoch=16, updates_per_epoch=20,
                          buffer_capacity=1024, window=2, explore_eps=0.15,
                          entropy_coef=0.03, lr_actor=0.05, lr_critic=0.25,
                          eval_every=100, eval_episodes=1, out_dir="runs/demo")
        train(cfg)
    static = args.static if os.path.isdir(args.static) else None
    server = BridgeServer(host="127.0.0.1", port=args.port, static_dir=static)
    print(f"serving on 127.0.0.1:{server.port} "
          f"(open a TCP NDJSON client or the browser console)")
    print(f"example open message: {{\"type\": \"open\", "
          f"\"checkpoint\": \"{args.checkpoint}\", \"seed\": 0}}")
    server.serve_forever()


if __name__ == "__main__":
    main()
