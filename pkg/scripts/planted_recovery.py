#!/usr/bin/env python3
"""Planted-expert recovery: models with one constructed dominant expert per
layer; the pathfinder mask at retention 1/N_e should contain every planted
expert while layer-uniform random masks essentially never do."""

import argparse
import sys

from moe_pathfinder.harness import planted_recovery_trial
from moe_pathfinder.model import MoEConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--trials", type=int, default=10)
    parser.add_argument("--layers", type=int, default=6)
    parser.add_argument("--experts", type=int, default=8)
    parser.add_argument("--dim", type=int, default=32)
    parser.add_argument("--topk", type=int, default=2)
    args = parser.parse_args()

    config = MoEConfig(
        num_layers=args.layers,
        experts_per_layer=args.experts,
        hidden_dim=args.dim,
        top_k=args.topk,
    )
    pf_hits = rand_hits = 0
    for seed in range(args.trials):
        pf, rand = planted_recovery_trial(config, seed)
        pf_hits += pf
        rand_hits += rand
        print(f"seed {seed}: pathfinder {'hit' if pf else 'MISS'}, random {'hit' if rand else 'miss'}")
    print(f"\npathfinder {pf_hits}/{args.trials}, random {rand_hits}/{args.trials}")
    return 0 if pf_hits == args.trials else 1


if __name__ == "__main__":
    sys.exit(main())
