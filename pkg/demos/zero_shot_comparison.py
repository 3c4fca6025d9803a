"""Zero-shot comparison of manual, learned and combined training instructions.

Trains every zero-shot arm for each seed and prints the per-type table with
95% t half-widths.  Four seeds at default settings take about a minute and a
half on one core.

    python3 demos/zero_shot_comparison.py --seeds 0 1 2 3
"""

import argparse

from bilopt.harness import experiments as X
from bilopt.harness.config import RunConfig, apply_overrides


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    p.add_argument("--out", help="also write metrics, traces and checkpoints here")
    args = p.parse_args()

    cfg = apply_overrides(RunConfig(), ["run.seeds=" + ",".join(map(str, args.seeds))]).validate()
    res = X.run_main_comparison(cfg, args.out, list(X.ZERO_SHOT_ARMS))
    print(res.table)


if __name__ == "__main__":
    main()
