"""Full tap x depth x dropout probe grid on the planted-tap dataset.

Only tap 5 carries the label, so the selected cell should sit on tap 5.

    python3 scripts/probe_grid.py [--n 300] [--seed 0]
"""
import argparse

import numpy as np

from micap.probe import Grid, TaskSpec, grid_search
from micap.synthetic import PlantedTapEncoder, planted_tap_images


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--hidden", type=int, default=64)
    args = parser.parse_args()
    labels = np.arange(args.n) % 2
    images = planted_tap_images(args.n)
    a, b = args.n // 2, 3 * args.n // 4
    task = TaskSpec("planted", "single-label", (images[:a], labels[:a]), (images[a:b], labels[a:b]),
                    (images[b:], labels[b:]))
    report = grid_search(PlantedTapEncoder(labels), task, Grid(hidden_width=args.hidden), seed=args.seed)
    report.model = "planted"
    print(report.to_csv(), end="")
    tap, depth, dropout = report.selected
    print(f"selected tap {tap}, depth {depth}, dropout {dropout}; test accuracy {report.test_metric:.3f}")


if __name__ == "__main__":
    main()
