"""Fraction of planted runs whose confidence band misses a probe pair at any round.

    python scripts/coverage_study.py --runs 200 --T 1000 --d 3
"""
import argparse
import time

import numpy as np

from depo.driver import run_planted_coverage
from depo.world import WorldSpec, build_world


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--runs", type=int, default=200)
    ap.add_argument("--T", type=int, default=1000)
    ap.add_argument("--d", type=int, default=3)
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--probe", type=int, default=200)
    args = ap.parse_args()

    t0 = time.perf_counter()
    firsts = []
    for k in range(args.runs):
        w = build_world(WorldSpec(feature_dim=args.d, seed=1000 + k))
        rng = np.random.default_rng(k)
        probe = np.stack([rng.integers(w.M, size=args.probe), rng.integers(w.K, size=args.probe),
                          rng.integers(w.K, size=args.probe)], axis=1)
        out = run_planted_coverage(w, args.T, 1.0, args.delta, seed=k, probe=probe)
        if out["violated"]:
            firsts.append(out["first_violation"])
    print(f"violating runs: {len(firsts)}/{args.runs} = {len(firsts) / args.runs:.3f} "
          f"(target <= {args.delta} + 0.05); first violations at {sorted(firsts)[:10]}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
