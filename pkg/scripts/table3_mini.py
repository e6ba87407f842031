"""Train and benchmark every registered architecture at desk scale, then print
the markdown table.

    python3 scripts/table3_mini.py [--config configs/table3_mini.yaml]
"""

import argparse
import sys
from pathlib import Path

from ministl.cli import main as cli


def run(default_config: str, description: str = __doc__.splitlines()[0]) -> int:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--config", default=default_config)
    ap.add_argument("--epochs")
    args = ap.parse_args()
    argv = ["bench", "--config", args.config, "-v"] + (["--epochs", args.epochs] if args.epochs else [])
    code = cli(argv)
    out = sorted(Path(".").glob("runs/*/bench-*/report.md"), key=lambda p: p.stat().st_mtime)
    if out:
        print(out[-1].read_text())
    return code


if __name__ == "__main__":
    sys.exit(run("configs/table3_mini.yaml"))
