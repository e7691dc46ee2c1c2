#!/usr/bin/env python3
"""Sweep the calibration cluster count K and report the pathfinder's mean
reconstruction error at each value."""

import argparse
import sys

from moe_pathfinder.harness import ExperimentConfig, sweep_calibration_k


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--k-values", type=int, nargs="+", default=[2, 4, 8, 16, 32])
    parser.add_argument("--seeds", type=int, default=5)
    args = parser.parse_args()

    config = ExperimentConfig(model_seeds=tuple(range(args.seeds)))
    results = sweep_calibration_k(config, args.k_values)
    print(f"{'K':>4} {'mean pathfinder error':>22}")
    for k, err in results:
        print(f"{k:>4} {err:>22.4e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
