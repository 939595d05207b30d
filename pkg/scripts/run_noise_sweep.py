"""Noise-level sweep on the reference task, 0% to 160% mixed corruption."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

from dualcan import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--out-dir", default=ROOT / "results" / "sweep")
    args = parser.parse_args()
    return cli.cmd_sweep(ROOT / "configs" / "reference.ini", args.out_dir, jobs=args.jobs)


if __name__ == "__main__":
    sys.exit(main())
