#!/usr/bin/env python3
"""Single-view reconstruction error on held-out targets, optionally sweeping one config field.

    python3 scripts/reconstruction_sweep.py --limit 10
    python3 scripts/reconstruction_sweep.py --sweep resample_target_factor=0,0.025,0.05,0.1
"""

import argparse
import dataclasses
import logging

import numpy as np

from _common import add_setup_args, build, setup_from_args
from vvn.harness import evaluate_reconstruction
from vvn.recon import ReconConfig


def parse_sweep(text):
    name, values = text.split("=", 1)
    field_type = {f.name: f.type for f in dataclasses.fields(ReconConfig)}
    if name not in field_type:
        raise SystemExit(f"unknown ReconConfig field {name!r}")
    default = getattr(ReconConfig(), name)
    cast = type(default) if not isinstance(default, bool) else (lambda v: v.lower() in ("1", "true", "on"))
    return name, [cast(v) for v in values.split(",")]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    add_setup_args(ap)
    ap.add_argument("--limit", type=int, help="only the first N held-out targets")
    ap.add_argument("--sweep", help="field=v1,v2,... of ReconConfig")
    ap.add_argument("--threshold", type=float, default=0.05)
    ap.add_argument("--out", help="CSV of per-target errors (last sweep value)")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    _, test, gt, net, comp = build(setup_from_args(args))
    name, values = parse_sweep(args.sweep) if args.sweep else (None, [None])
    for v in values:
        cfg = ReconConfig() if name is None else dataclasses.replace(ReconConfig(), **{name: v})
        rep = evaluate_reconstruction(test, net, comp, gt, cfg, limit=args.limit)
        fr = rep.fractions()
        label = "defaults" if name is None else f"{name}={v}"
        print(f"{label:40s} below {args.threshold:.0%}: {int((fr < args.threshold).sum())}/{len(fr)}  "
              f"median {np.median(fr):.4f}  mean {fr.mean():.4f}")
        if args.out:
            rep.write_csv(args.out)


if __name__ == "__main__":
    main()
