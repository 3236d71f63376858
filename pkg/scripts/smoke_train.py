#!/usr/bin/env python3
"""Desk check: train a tiny full-KL model for a few epochs and print metrics.

Runs in seconds; useful to eyeball that all loss components fall and that
l_smooth sinks below l_ld and l_exp, before committing to the full protocol.
"""

import argparse
import sys

from fullkl.data import gen_synthetic, split
from fullkl.grid import make_grid
from fullkl.losses import FAMILY_FULL_KL, LossSpec
from fullkl.model import TrainConfig, derive_seeds, train_run


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n", type=int, default=500, help="number of samples")
    parser.add_argument("--d-in", type=int, default=8, help="feature dimension")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    grid = make_grid(0.0, 100.0, 1.0)
    cfg = TrainConfig(epochs=args.epochs, loss=LossSpec(FAMILY_FULL_KL), seed=args.seed)
    dataset = gen_synthetic(args.n, args.d_in, grid, (2.0, 6.0), seed=20240)
    split_seed, _, _ = derive_seeds(cfg.seed)
    train_ds, val_ds = split(dataset, cfg.val_fraction, split_seed)

    result = train_run(train_ds, val_ds, grid, cfg, quiet=True)
    print(f"{'epoch':>5}  {'split':<5}  {'l_ld':>9}  {'l_exp':>9}  {'l_smooth':>9}  {'total':>9}  {'mae':>7}")
    for m in result.history:
        b = m.breakdown
        print(
            f"{m.epoch:>5}  {m.split:<5}  {b.l_ld:>9.4f}  {b.l_exp:>9.4f}  "
            f"{b.l_smooth:>9.5f}  {b.total:>9.4f}  {m.mae:>7.3f}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
