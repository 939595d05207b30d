"""End-to-end reference run: generate data, train, assemble the report.

Writes everything under results/reference/.
"""
from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

from dualcan import cli


def main() -> int:
    config = ROOT / "configs" / "reference.ini"
    data_dir = ROOT / "results" / "reference" / "data"
    run_dir = ROOT / "results" / "reference" / "run"
    report_dir = ROOT / "results" / "reference" / "report"

    for step, code in (
        ("gen", cli.cmd_gen(config, data_dir)),
        ("train", cli.cmd_train(config, data_dir, run_dir)),
        ("report", cli.cmd_report(run_dir, report_dir)),
    ):
        if code != 0:
            print(f"{step} failed with exit code {code}", file=sys.stderr)
            return code
    print(f"outputs under {run_dir} and {report_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
