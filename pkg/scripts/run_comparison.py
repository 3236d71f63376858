#!/usr/bin/env python3
"""Run the default full-KL vs reference(lambda=1) comparison.

Trains both loss families on the shared synthetic protocol (5,000 samples,
d_in=16, grid 0..100, 10 seeds, 60 epochs) and writes per-seed metrics,
checkpoints, per-epoch summaries, and the paired comparison report.
Expect a few minutes of wall time; pass --seeds 0,1 for a quick look.
"""

import argparse
import sys
from pathlib import Path

from fullkl.runner import main as fullkl_main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs", help="root directory for all outputs")
    parser.add_argument("--seeds", default=None, help="override the seed list (comma-separated)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress logging")
    args = parser.parse_args()

    argv = [
        "compare",
        str(CONFIGS / "full_kl.json"),
        str(CONFIGS / "reference.json"),
        "--out-dir", args.out_dir,
    ]
    if args.seeds is not None:
        argv += ["--seeds", args.seeds]
    if args.quiet:
        argv.append("--quiet")
    return fullkl_main(argv)


if __name__ == "__main__":
    sys.exit(main())
