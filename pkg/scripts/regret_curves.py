"""Per-round regret profile and the T/4-vs-T ratio for each arm.

    python scripts/regret_curves.py --seeds 5 --objective exact
"""
import argparse
import math

import numpy as np

from depo.driver import ARMS, RunConfig, run_arm
from depo.world import WorldSpec, build_world


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=2000)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--objective", choices=("pruned", "exact"), default="pruned")
    ap.add_argument("--width-mode", choices=("proxy", "theoretical"), default="proxy")
    ap.add_argument("--c-b", type=float, default=0.02)
    ap.add_argument("--beta", type=float, default=0.03)
    ap.add_argument("--world-seed", type=int, default=0)
    ap.add_argument("--bins", type=int, default=10)
    args = ap.parse_args()

    world = build_world(WorldSpec(seed=args.world_seed))
    cfg = RunConfig(T=args.T, alpha=float(math.ceil(math.sqrt(args.T))), beta=args.beta,
                    c_b=args.c_b, objective=args.objective, width_mode=args.width_mode,
                    diagnostics=False)
    width = args.T // args.bins
    print(f"T={args.T} alpha={cfg.alpha:g} objective={args.objective} width={args.width_mode}")
    for arm in ARMS:
        incs = np.array([run_arm(world, cfg, seed=s, arm=arm).column("regret_increment")
                         for s in range(args.seeds)])
        mean = incs.mean(axis=0)
        bins = " ".join(f"{mean[i:i + width].mean():.4f}" for i in range(0, args.T, width))
        q = args.T // 4
        ratio = (incs.sum(axis=1).mean() / args.T) / (incs[:, :q].sum(axis=1).mean() / q)
        print(f"{arm:14s} Reg_T={incs.sum(axis=1).mean():8.2f} ratio={ratio:.3f} | {bins}")


if __name__ == "__main__":
    main()
