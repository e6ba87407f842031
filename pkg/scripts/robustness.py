"""Evaluate clean-trained models under the three perturbations.

    python3 scripts/robustness.py [--config configs/robustness.yaml]
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
from table3_mini import run  # noqa: E402

if __name__ == "__main__":
    sys.exit(run("configs/robustness.yaml", __doc__.splitlines()[0]))
