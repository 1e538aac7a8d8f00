"""Diversity constant of gaussian vs clustered worlds under uniform policies."""
import numpy as np

from depo.driver import diversity_gamma
from depo.world import WorldSpec, build_world


def main(seeds=10):
    print("seed  gaussian   clustered  ratio")
    for seed in range(seeds):
        kw = dict(num_prompts=16, pool_size=4, feature_dim=4, seed=seed)
        u = np.full((16, 4), 0.25)
        g = diversity_gamma(build_world(WorldSpec(**kw)), u, u)
        c = diversity_gamma(build_world(WorldSpec(generator="clustered", **kw)), u, u)
        print(f"{seed:4d}  {g:.6f}  {c:.6f}  {g / c:6.1f}")


if __name__ == "__main__":
    main()
