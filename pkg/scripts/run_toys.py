"""Characterize each bundled toy system and compare against its exhaustive oracle.

    python3 scripts/run_toys.py --seeds 5
"""

import argparse
import sys

from almostsafe.cli import oracle_check


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=5)
    args = p.parse_args()
    results = oracle_check(seeds=range(args.seeds))
    for name, seed, ok in results:
        print(f"{name:8s} seed={seed}: {'match' if ok else 'MISMATCH'}")
    return 0 if all(ok for *_, ok in results) else 2


if __name__ == "__main__":
    sys.exit(main())
