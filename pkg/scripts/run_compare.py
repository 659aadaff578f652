"""Train and compare methods on the nuisance benchmark.

    python scripts/run_compare.py                       # none vs adacs
    python scripts/run_compare.py scripts/configs/all_methods.txt
    ADACS_WORKERS=4 python scripts/run_compare.py ...   # parallel over (method, seed)

Results land in the config's ``out`` directory (compare_summary.csv etc).
"""

import sys
from pathlib import Path

from adacs.cli import main

DEFAULT = Path(__file__).parent / "configs" / "central.txt"

if __name__ == "__main__":
    config = sys.argv[1] if len(sys.argv) > 1 else str(DEFAULT)
    sys.exit(main(["compare", "--config", config, *sys.argv[2:]]))
