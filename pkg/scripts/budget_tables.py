"""Print parameter budgets for every model config under configs/."""

import argparse
from pathlib import Path

from rebalance.budget import budget_table
from rebalance.config import load_run_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--configs", default=Path(__file__).resolve().parent.parent / "configs", type=Path)
    a = p.parse_args()
    rows = [(path.stem, load_run_config(path).model) for path in sorted(a.configs.glob("*.cfg"))]
    print(budget_table(rows))


if __name__ == "__main__":
    main()
