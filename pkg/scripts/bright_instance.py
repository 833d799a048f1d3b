"""Train on bags captioned by the colour of their one bright instance, then check where attention goes.

    python3 scripts/bright_instance.py [--steps 600] [--seed 0]
"""
import argparse

import numpy as np

from micap.experiments import bright_instance_run


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=600)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    run = bright_instance_run(seed=args.seed, max_steps=args.steps)
    for shares, target in list(zip(run.shares, run.targets))[:5]:
        print(f"  bright instance {target}: shares {np.round(shares, 3).tolist()}")
    print(f"argmax on the bright instance for {run.accuracy:.1%} of {len(run.targets)} held-out bags")


if __name__ == "__main__":
    main()
