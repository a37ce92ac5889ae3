"""Run one experiment twice with the same seed and compare outputs byte by byte.

``timing.json`` is excluded since it records wall-clock time.

Usage: python scripts/check_reproducible.py EXPERIMENT [--seed S] [--set key=value ...]
"""

import argparse
import filecmp
import sys
import tempfile
from pathlib import Path

from contrastive import cli


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("experiment", choices=sorted(cli.EXPERIMENTS))
    p.add_argument("--seed", default="0")
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args()
    extra = [a for s in args.set for a in ("--set", s)]
    with tempfile.TemporaryDirectory() as tmp:
        dirs = [Path(tmp) / r for r in ("a", "b")]
        for d in dirs:
            rc = cli.main([args.experiment, "--seed", args.seed, "--out", str(d), *extra])
            if rc:
                return rc
        names = sorted(f.name for f in dirs[0].iterdir() if f.name != "timing.json")
        _, mismatch, errors = filecmp.cmpfiles(*dirs, names, shallow=False)
    if mismatch or errors:
        print(f"DIFFER: {mismatch + errors}")
        return 1
    print(f"identical: {', '.join(names)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
