"""Random-subspace sweep on the synthetic tasks, printing d_90 and relative complexity.

    python3 scripts/subspace_sweep.py [--task linreg] [--d 1,2,4,8,16,32] [--steps 300] [--lr 0.05]
"""
import argparse

from micap.subspace import Budget, run_sweep
from micap.synthetic import SUBSPACE_TASKS


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--task", choices=sorted(SUBSPACE_TASKS), default="linreg")
    parser.add_argument("--d", default="1,2,4,8,16,32")
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--lr", type=float, default=0.05)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    d_values = [int(x) for x in args.d.split(",") if x]
    curve = run_sweep(SUBSPACE_TASKS[args.task](), d_values, Budget(args.steps, args.lr), args.seed)
    print(curve.to_csv(), end="")
    summary = curve.summary()
    print(f"baseline {curve.baseline:.4f}  d_90 {summary['d_90']}  complexity {summary['complexity']}")


if __name__ == "__main__":
    main()
