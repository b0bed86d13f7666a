"""Command line entry point: ``vvn <subcommand> ...``.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .core import NumericalError, ValidationError, load_collection, save_collection
from .geometry import augment_with_mirrors
from .harness import (
    align_euclidean, benchmark_alignment, evaluate_alignment, evaluate_reconstruction, fmt,
    predict_pose_retrieval, topk_oracle_pose, write_curves_csv, write_pairs_csv,
)
from .network import (
    DEFAULT_K, DEFAULT_N_DOCK, align_fast, build_network, compress, dock, load_network,
    random_docking, random_network, save_network,
)
from .recon import ReconConfig, reconstruct, write_ply, write_report
from .synth import (
    SynthConfig, generate, get_model, ground_truth_path, load_ground_truth, save_ground_truth, split,
)

log = logging.getLogger("vvn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def test_collection_path(out) -> Path:
    """``c.vvn`` -> ``c.test.vvn``."""
    p = Path(out)
    return p.with_name(p.stem + ".test" + p.suffix) if p.suffix else p.with_name(p.name + ".test")


# ---------------------------------------------------------------------------
# shared helpers


def _load_network(args, collection):
    """Network over ``collection`` plus its mirrors (or the collection alone, if built that way)."""
    aug = augment_with_mirrors(collection)
    try:
        net, comp = load_network(args.network, aug)
    except ValidationError:
        net, comp = load_network(args.network, collection)
    if comp is None:
        comp = compress(net)
    return net, comp


def _find(collection, instance_id):
    for inst in collection.instances:
        if inst.id == instance_id:
            return inst
    raise ValidationError(f"no instance with id {instance_id!r}")


def _pose(args, target, train):
    if args.pose_topk_oracle:
        return topk_oracle_pose(target, train, args.pose_topk_oracle)
    if args.pose == "retrieval":
        return predict_pose_retrieval(target, train, exclude_ids=(target.id,))
    if target.camera is None:
        raise ValidationError(f"instance {target.id!r} has no camera; use --pose retrieval")
    return target.camera


def _test_source(args, train_path, height):
    if args.test:
        return load_collection(args.test, height)
    return load_collection(train_path, height)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    cfg = SynthConfig(
        n_instances=args.n, descriptor_dim=args.descriptor_dim,
        descriptor_noise_sigma=args.desc_noise, keypoint_noise_sigma_px=args.kp_noise,
        deformation_scale=args.deformation, view_dependence=args.view_dependence, seed=args.seed,
    )
    coll, gt = generate(get_model(args.model), cfg)
    out = Path(args.out)
    if args.n_test:
        train, test = split(coll, args.n_test)
        tpath = test_collection_path(out)
        save_collection(train, out)
        save_collection(test, tpath)
        save_ground_truth(gt, ground_truth_path(out))
        save_ground_truth(gt, ground_truth_path(tpath))
        log.info("wrote %d training and %d test instances", len(train), len(test))
    else:
        save_collection(coll, out)
        save_ground_truth(gt, ground_truth_path(out))
        log.info("wrote %d instances", len(coll))
    return 0


def cmd_build_network(args):
    coll = load_collection(args.input, args.height)
    if not args.no_mirror:
        coll = augment_with_mirrors(coll)
    alpha = "auto" if args.alpha == "auto" else float(args.alpha)
    t0 = time.perf_counter()
    net = build_network(coll, k=args.k, alpha=alpha, threads=args.threads, seed=args.seed)
    comp = compress(net)
    save_network(args.out, net, comp)
    log.info("network: %d nodes, %d instances, alpha %s, %.1fs", net.n_nodes, net.n_instances,
             fmt(net.alpha), time.perf_counter() - t0)
    return 0


def cmd_align(args):
    train = load_collection(args.collection, args.height)
    test = _test_source(args, args.collection, args.height)
    target = _find(test, args.target_id)
    if args.method == "vvn":
        net, comp = _load_network(args, train)
        res = align_fast(comp, dock(target, net, _pose(args, target, train), args.n_dock))
        insts = net.collection.instances
    else:
        res = align_euclidean(target, train)
        insts = train.instances
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_point", "instance_id", "grid_index", "x", "y", "distance"])
        for j, inst in enumerate(insts):
            nodes = res.match_node[:, j]
            for p in np.flatnonzero(nodes >= 0):
                g = int(nodes[p] - res.offsets[j])
                x, y = inst.grid.points[g]
                w.writerow([int(p), inst.id, g, fmt(x), fmt(y), fmt(res.match_dist[p, j])])
    return 0


def cmd_reconstruct(args):
    train = load_collection(args.collection, args.height)
    test = _test_source(args, args.collection, args.height)
    target = _find(test, args.target_id)
    net, comp = _load_network(args, train)
    cfg = ReconConfig(n_inliers_per_pair=args.inliers, xy_snap=not args.no_snap,
                      mirror=not args.no_mirror, n_dock=args.n_dock)
    pose = _pose(args, target, train)
    res = reconstruct(target, net, comp, cfg, poses=[pose])
    write_ply(res.cloud, args.out, comments=[f"target {target.id}"])
    write_report(res.report, args.report or str(args.out) + ".json")
    log.info("reconstructed %d points, residual %.3g px", len(res.cloud), res.report["residual_px"])
    return 0


def cmd_eval_align(args):
    train = load_collection(args.collection, args.height)
    test = _test_source(args, args.collection, args.height)
    methods = tuple(dict.fromkeys(args.method or ["vvn", "euclid"]))
    net = comp = None
    if "vvn" in methods:
        net, comp = _load_network(args, train)
    poses = [_pose(args, t, train) for t in test.instances]
    reports = evaluate_alignment(train, test, methods, net, comp, poses, args.n_dock, args.threads)
    write_curves_csv(reports, args.out, args.bin_width)
    if args.pairs:
        write_pairs_csv(reports, args.pairs)
    return 0


def cmd_eval_recon(args):
    train = load_collection(args.collection, args.height)
    test_path = args.test or args.collection
    test = load_collection(test_path, args.height)
    gt = load_ground_truth(args.ground_truth or ground_truth_path(test_path))
    net, comp = _load_network(args, train)
    cfg = ReconConfig(xy_snap=not args.no_snap, mirror=not args.no_mirror, n_dock=args.n_dock)
    insts = test.instances[: args.limit]
    poses = [_pose(args, t, train) for t in insts]
    rep = evaluate_reconstruction(test.with_instances(insts), net, comp, gt, cfg, poses)
    rep.write_csv(args.out, timing=not args.no_timing)
    fr = rep.fractions()
    log.info("median rmse %.4f of the diameter; %d/%d below 5%%", float(np.median(fr)),
             int((fr < 0.05).sum()), len(fr))
    return 0


def cmd_bench(args):
    rng = np.random.default_rng(args.seed)
    net = random_network(args.instances, args.points, args.k, rng)
    t0 = time.perf_counter()
    comp = compress(net)
    t_comp = time.perf_counter() - t0
    docks = [random_docking(net, args.test_points, args.n_dock, rng) for _ in range(args.queries)]
    rep = benchmark_alignment(net, comp, docks)
    d = rep.as_dict()
    d["compress_seconds"] = t_comp
    text = "\n".join(f"{k}: {fmt(v) if isinstance(v, float) else v}" for k, v in d.items()) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_pose(p):
    p.add_argument("--pose", choices=("oracle", "retrieval"), default="oracle",
                   help="test viewpoint: ground-truth camera or retrieval prediction")
    p.add_argument("--pose-topk-oracle", type=int, default=0, metavar="K",
                   help="best of the K retrieved poses, judged against the true camera")
    p.add_argument("--n-dock", type=int, default=DEFAULT_N_DOCK)


def build_parser() -> argparse.ArgumentParser:
    def shared(suppress):
        # sub-level copies must not overwrite values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--threads", type=int, default=d(1))
        p.add_argument("--seed", type=int, default=d(0))
        p.add_argument("--height", type=float, default=d(150.0),
                       help="bounding-box height instances are normalized to on load")
        p.add_argument("-v", "--verbose", action="count", default=d(0))
        return p

    common = shared(True)
    ap = _Parser(prog="vvn", description="Viewpoint-graph alignment and single-view reconstruction of object classes.",
                 parents=[shared(False)])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic collection")
    p.add_argument("--model", default="car", choices=("car", "aeroplane", "boat"))
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--n-test", type=int, default=0, help="hold out the last N instances into <out>.test")
    p.add_argument("--out", required=True)
    p.add_argument("--descriptor-dim", type=int, default=32)
    p.add_argument("--desc-noise", type=float, default=0.1)
    p.add_argument("--kp-noise", type=float, default=1.0)
    p.add_argument("--deformation", type=float, default=0.05)
    p.add_argument("--view-dependence", type=float, default=0.5)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-network", parents=[common], help="build and compress a network")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--alpha", default="auto")
    p.add_argument("--no-mirror", action="store_true", help="do not add mirrored instances")
    p.set_defaults(func=cmd_build_network)

    p = sub.add_parser("align", parents=[common], help="align one test instance to the collection")
    p.add_argument("--collection", required=True)
    p.add_argument("--network")
    p.add_argument("--test", help="collection holding the target (default: --collection)")
    p.add_argument("--target-id", required=True)
    p.add_argument("--method", choices=("vvn", "euclid"), default="vvn")
    p.add_argument("--out", required=True)
    _add_pose(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct one target")
    p.add_argument("--collection", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--test")
    p.add_argument("--target-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--inliers", type=int, default=10, help="synthetic inliers per keypoint pair")
    p.add_argument("--no-mirror", action="store_true")
    p.add_argument("--no-snap", action="store_true")
    _add_pose(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval-align", parents=[common], help="alignment error versus viewpoint")
    p.add_argument("--collection", required=True)
    p.add_argument("--network")
    p.add_argument("--test")
    p.add_argument("--method", action="append", choices=("vvn", "euclid"))
    p.add_argument("--bin-width", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs")
    _add_pose(p)
    p.set_defaults(func=cmd_eval_align)

    p = sub.add_parser("eval-recon", parents=[common], help="reconstruction error on held-out targets")
    p.add_argument("--collection", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--test")
    p.add_argument("--ground-truth")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-mirror", action="store_true")
    p.add_argument("--no-snap", action="store_true")
    p.add_argument("--no-timing", action="store_true", help="omit the runtime column")
    _add_pose(p)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("bench", parents=[common], help="fast versus Dijkstra alignment timing")
    p.add_argument("--instances", type=int, default=300)
    p.add_argument("--points", type=int, default=350)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--n-dock", type=int, default=DEFAULT_N_DOCK)
    p.add_argument("--test-points", type=int, default=150)
    p.add_argument("--queries", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "network", "") is None and args.command in ("align", "eval-align"):
        if args.command == "align" and args.method == "vvn" or \
                args.command == "eval-align" and "vvn" in (args.method or ["vvn"]):
            ap.error("--network is required for the vvn method")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"vvn: invalid input: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as e:
        print(f"vvn: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"vvn: numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
