"""Print the theory-bench report (contraction, half-step descent, FFA gap) as JSON.

    python scripts/theory_report.py --seeds 10
"""

import argparse
import sys

from lalora.cli import dump_json, theory_report


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    args = p.parse_args()
    rep = theory_report(args.seeds)
    sys.stdout.write(dump_json(rep))
    return 0 if rep["contraction"]["passed"] and rep["half_step_descent"]["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
