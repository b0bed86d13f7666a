#!/usr/bin/env python3
"""Keypoint transfer error versus viewpoint difference, network alignment against euclidean matching.

    python3 scripts/alignment_curves.py --out curves.csv
"""

import argparse
import logging

from _common import add_setup_args, build, setup_from_args
from vvn.harness import evaluate_alignment, write_curves_csv, write_pairs_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_setup_args(ap)
    ap.add_argument("--bin-width", type=float, default=30.0)
    ap.add_argument("--out", default="curves.csv")
    ap.add_argument("--pairs")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    train, test, _, net, comp = build(setup_from_args(args))
    reports = evaluate_alignment(train, test, network=net, compressed=comp)
    write_curves_csv(reports, args.out, args.bin_width)
    if args.pairs:
        write_pairs_csv(reports, args.pairs)
    vvn, euc = reports["vvn"].curve(args.bin_width), reports["euclid"].curve(args.bin_width)
    print(f"{'bin':>9} {'pairs':>6} {'vvn px':>8} {'euclid px':>10}")
    for a, b in zip(vvn, euc):
        print(f"{a.lo:4.0f}-{a.hi:<4.0f} {a.count:6d} {a.mean_error:8.2f} {b.mean_error:10.2f}")


if __name__ == "__main__":
    main()
