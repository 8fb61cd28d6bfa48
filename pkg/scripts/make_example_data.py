#!/usr/bin/env python3
"""Write one simulated barge-like dataset to CSV, ready for ``pmcrossover fit``."""
import argparse

from pmcrossover.io import write_csv
from pmcrossover.simulate import barge_like, simulate_dataset


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out")
    ap.add_argument("--n-pairs", type=int, default=40)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)
    records = simulate_dataset(barge_like(n_pairs=args.n_pairs, seed=args.seed))
    write_csv(records, args.out)
    print(f"wrote {len(records)} pairs to {args.out}")


if __name__ == "__main__":
    main()
