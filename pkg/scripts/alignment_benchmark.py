#!/usr/bin/env python3
"""Compressed versus Dijkstra alignment time on random networks of growing size.

    python3 scripts/alignment_benchmark.py --instances 50 150 300
"""

import argparse
from dataclasses import dataclass

import numpy as np

from vvn.harness import benchmark_alignment
from vvn.network import random_docking, random_network


@dataclass
class BenchConfig:
    points: int = 350
    k: int = 30
    n_dock: int = 10
    test_points: int = 150
    queries: int = 3
    seed: int = 0


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--instances", type=int, nargs="+", default=[50, 150, 300])
    d = BenchConfig()
    for name, value in vars(d).items():
        ap.add_argument("--" + name.replace("_", "-"), type=int, default=value)
    args = ap.parse_args()
    cfg = BenchConfig(args.points, args.k, args.n_dock, args.test_points, args.queries, args.seed)
    rng = np.random.default_rng(cfg.seed)
    print(f"{'nodes':>8} {'inst':>5} {'compress s':>11} {'fast ms/query':>14} {'dijkstra s/query':>17} {'speedup':>8}")
    for n in args.instances:
        net = random_network(n, cfg.points, min(cfg.k, n - 1), rng)
        docks = [random_docking(net, cfg.test_points, cfg.n_dock, rng) for _ in range(cfg.queries)]
        r = benchmark_alignment(net, None, docks)
        print(f"{r.n_nodes:8d} {r.n_instances:5d} {r.compress_seconds:11.1f} "
              f"{1000 * r.fast_seconds / r.n_queries:14.2f} {r.dijkstra_seconds / r.n_queries:17.2f} "
              f"{r.speedup:8.0f}")


if __name__ == "__main__":
    main()
