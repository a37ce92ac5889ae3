"""Run every experiment at its default config into one output tree.

Usage: python scripts/run_experiments.py [--out runs] [--seed 0] [--skip boed-sir ...]
"""

import argparse
import sys
from pathlib import Path

from contrastive import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", default="0")
    p.add_argument("--skip", nargs="*", default=[], choices=sorted(cli.EXPERIMENTS))
    args = p.parse_args()
    status = 0
    for name in cli.EXPERIMENTS:
        if name in args.skip:
            continue
        print(f"== {name}", flush=True)
        rc = cli.main([name, "--seed", args.seed, "--out", str(Path(args.out) / name)])
        status = status or rc
    return status


if __name__ == "__main__":
    sys.exit(main())
