"""Alignment and reconstruction metrics, baselines, benchmarks and CSV output."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import Camera, Collection, KeypointSet, ObjectInstance, ValidationError
from .geometry import (
    augment_with_mirrors, procrustes_rmse_min_depth, rotation_from_axis_angle,
    viewpoint_difference_deg,
)
from .network import (
    AlignmentResult, CompressedNetwork, DockingSet, VVNetwork, align_dijkstra, align_fast, dock,
)

N_POSE_BINS = 24
DEFAULT_BIN_WIDTH = 30.0


def fmt(x) -> str:
    """Fixed 9-significant-digit rendering used in every CSV."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


# ---------------------------------------------------------------------------
# alignment error


def alignment_error(matched_points, test_kps: KeypointSet, train_kps: KeypointSet, test_grid) -> float:
    """Mean distance between transferred and true keypoints, in pixels.

    For every keypoint visible in both views, the test grid point nearest to
    the test keypoint is looked up in ``matched_points`` (its matched location
    in the training view, NaN when unmatched) and compared with the training
    keypoint. Keypoints whose grid point has no match are left out.
    """
    pts = np.asarray(test_grid, float).reshape(-1, 2)
    match = np.asarray(matched_points, float).reshape(-1, 2)
    if len(match) != len(pts):
        raise ValidationError("alignment_error: one matched point per test grid point required")
    shared = np.flatnonzero(test_kps.visible & train_kps.visible)
    if shared.size == 0:
        raise ValidationError("alignment_error: no keypoint visible in both views")
    nearest = np.argmin(cdist(test_kps.positions[shared], pts), axis=1)
    c = match[nearest]
    ok = np.isfinite(c[:, 0])
    if not np.any(ok):
        raise ValidationError("alignment_error: no keypoint has a matched grid point")
    return float(np.mean(np.linalg.norm(c[ok] - train_kps.positions[shared[ok]], axis=1)))


def matched_coordinates(alignment: AlignmentResult, instance_index: int, train: ObjectInstance):
    idx = alignment.matched_points(instance_index)
    out = np.full((len(idx), 2), np.nan)
    ok = idx >= 0
    out[ok] = train.grid.points[idx[ok]]
    return out


def align_euclidean(test: ObjectInstance, collection: Collection, instances=None) -> AlignmentResult:
    """Baseline: each test point goes to its descriptor-nearest point in every instance."""
    sizes = [len(i.grid) for i in collection.instances]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    J = len(collection)
    P = len(test.grid)
    node = np.full((P, J), -1, np.int64)
    dist = np.full((P, J), np.inf)
    which = range(J) if instances is None else instances
    for j in which:
        D = cdist(test.grid.descriptors, collection.instances[j].grid.descriptors)
        a = np.argmin(D, axis=1)
        node[:, j] = offsets[j] + a
        dist[:, j] = D[np.arange(P), a]
    return AlignmentResult(node, dist, offsets, "euclid")


@dataclass(eq=False)
class AlignmentErrorReport:
    method: str
    test_ids: list = field(default_factory=list)
    train_ids: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    viewpoint_deg: list = field(default_factory=list)

    def add(self, test_id, train_id, error, viewpoint):
        self.test_ids.append(test_id)
        self.train_ids.append(train_id)
        self.errors.append(float(error))
        self.viewpoint_deg.append(float(viewpoint))

    def sorted(self) -> "AlignmentErrorReport":
        order = sorted(range(len(self.errors)), key=lambda k: (self.test_ids[k], self.train_ids[k]))
        out = AlignmentErrorReport(self.method)
        for k in order:
            out.add(self.test_ids[k], self.train_ids[k], self.errors[k], self.viewpoint_deg[k])
        return out

    def curve(self, bin_width: float = DEFAULT_BIN_WIDTH):
        return error_vs_viewpoint_curve(self.viewpoint_deg, self.errors, bin_width)


@dataclass(frozen=True)
class CurveBin:
    lo: float
    hi: float
    count: int
    mean_error: float


def error_vs_viewpoint_curve(viewpoint_deg, errors, bin_width: float = DEFAULT_BIN_WIDTH) -> list:
    """Mean error per viewpoint-difference bin; bins tile [0, 180], the last one closed."""
    v = np.asarray(viewpoint_deg, float)
    e = np.asarray(errors, float)
    if v.size == 0 or v.shape != e.shape:
        raise ValidationError("error_vs_viewpoint_curve: need matching, non-empty inputs")
    if not bin_width > 0:
        raise ValidationError("bin width must be positive")
    n = int(math.ceil(180.0 / bin_width - 1e-9))
    b = np.minimum((v // bin_width).astype(int), n - 1)
    out = []
    for k in range(n):
        sel = b == k
        out.append(CurveBin(k * bin_width, min(180.0, (k + 1) * bin_width), int(sel.sum()),
                            float(e[sel].mean()) if sel.any() else float("nan")))
    return out


def evaluate_alignment(train: Collection, tests: Collection, methods=("vvn", "euclid"),
                       network: Optional[VVNetwork] = None, compressed: Optional[CompressedNetwork] = None,
                       poses=None, n_dock: int = 10, threads: int = 1) -> dict:
    """Keypoint transfer error for every (test, original training instance) pair.

    ``network`` must be built over ``train`` followed by its mirrors, so the
    first ``len(train)`` network instances are the originals. ``poses``
    defaults to the test cameras.
    """
    for m in methods:
        if m not in ("vvn", "euclid"):
            raise ValidationError(f"unknown alignment method {m!r}")
    if "vvn" in methods and (network is None or compressed is None):
        raise ValidationError("the vvn method needs a network and its compression")
    poses = [t.camera for t in tests.instances] if poses is None else list(poses)
    J = len(train)

    def one(k):
        t = tests.instances[k]
        rows = {m: [] for m in methods}
        results = {}
        if "vvn" in methods:
            results["vvn"] = align_fast(compressed, dock(t, network, poses[k], n_dock))
        if "euclid" in methods:
            results["euclid"] = align_euclidean(t, train)
        for j, tr in enumerate(train.instances):
            if not np.any(t.keypoints.visible & tr.keypoints.visible):
                continue
            vd = float(viewpoint_difference_deg(t.camera.rotation, tr.camera.rotation))
            for m in methods:
                try:
                    e = alignment_error(matched_coordinates(results[m], j, tr), t.keypoints,
                                        tr.keypoints, t.grid.points)
                except ValidationError:
                    continue
                rows[m].append((t.id, tr.id, e, vd))
        return rows

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(one, range(len(tests))))
    else:
        parts = [one(k) for k in range(len(tests))]
    reports = {m: AlignmentErrorReport(m) for m in methods}
    for rows in parts:
        for m in methods:
            for r in rows[m]:
                reports[m].add(*r)
    return {m: r.sorted() for m, r in reports.items()}


def write_curves_csv(reports: dict, path, bin_width: float = DEFAULT_BIN_WIDTH):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "bin_lo_deg", "bin_hi_deg", "n_pairs", "mean_error_px"])
        for m in sorted(reports):
            for b in reports[m].curve(bin_width):
                w.writerow([m, fmt(b.lo), fmt(b.hi), b.count, fmt(b.mean_error)])


def write_pairs_csv(reports: dict, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "test_id", "train_id", "viewpoint_deg", "error_px"])
        for m in sorted(reports):
            r = reports[m]
            for k in range(len(r.errors)):
                w.writerow([m, r.test_ids[k], r.train_ids[k], fmt(r.viewpoint_deg[k]), fmt(r.errors[k])])


# ---------------------------------------------------------------------------
# pose prediction


def layout_descriptor(inst: ObjectInstance) -> np.ndarray:
    """Mean grid descriptor of the left half, the right half and the whole view.

    Pooling per half keeps the left/right layout, which a plain mean loses;
    this separates a view from its mirror image.
    """
    x0, _, x1, _ = inst.mask_bbox()
    d = inst.grid.descriptors
    left = inst.grid.points[:, 0] < 0.5 * (x0 + x1)
    parts = []
    for sel in (left, ~left):
        parts.append(d[sel].mean(0) if sel.any() else d.mean(0))
    parts.append(d.mean(0))
    return np.concatenate(parts)


def azimuth_of(rotation) -> float:
    """Azimuth (radians) of the optical axis around the object's vertical z axis."""
    d = np.asarray(rotation)[2]
    return math.atan2(d[1], d[0])


def snap_azimuth(camera: Camera, n_bins: int = N_POSE_BINS) -> Camera:
    """Rotate about the object's vertical axis to the nearest of ``n_bins`` azimuths."""
    step = 2 * math.pi / n_bins
    az = azimuth_of(camera.rotation)
    target = round(az / step) * step
    Rz = rotation_from_axis_angle([0, 0, 1], az - target)
    R = camera.rotation @ Rz
    u, _, vt = np.linalg.svd(R)
    return Camera(u @ vt, camera.scale, camera.translation)


def retrieve_poses(test: ObjectInstance, collection: Collection, k: int = 1, n_bins: int = N_POSE_BINS,
                   exclude_ids=()) -> list:
    """Poses of the ``k`` most similar training views, best first, azimuths snapped to ``n_bins`` bins."""
    cands = [i for i in collection.instances if i.camera is not None and i.id not in exclude_ids]
    if not cands:
        raise ValidationError("predict_pose_retrieval: no training instance with a camera")
    g = layout_descriptor(test)
    d = np.array([np.linalg.norm(layout_descriptor(i) - g) for i in cands])
    order = np.argsort(d, kind="stable")[: max(1, k)]
    return [snap_azimuth(cands[i].camera, n_bins) for i in order]


def predict_pose_retrieval(test: ObjectInstance, collection: Collection, n_bins: int = N_POSE_BINS,
                           exclude_ids=()) -> Camera:
    """Pose of the most similar training view, azimuth snapped to ``n_bins`` bins."""
    return retrieve_poses(test, collection, 1, n_bins, exclude_ids)[0]


def topk_oracle_pose(test: ObjectInstance, collection: Collection, k: int, n_bins: int = N_POSE_BINS) -> Camera:
    """Of the ``k`` retrieved poses, the one closest to the test's true camera."""
    if test.camera is None:
        raise ValidationError("top-k oracle pose needs the test's ground-truth camera")
    cands = retrieve_poses(test, collection, k, n_bins)
    return min(cands, key=lambda c: pose_error_deg(c, test.camera))


def pose_error_deg(a: Camera, b: Camera) -> float:
    return float(viewpoint_difference_deg(a.rotation, b.rotation))


# ---------------------------------------------------------------------------
# reconstruction error


@dataclass(eq=False)
class ReconErrorReport:
    rows: list = field(default_factory=list)

    def add(self, target_id, rmse_fraction, depth_sign, residual_px, seconds, n_points):
        self.rows.append(dict(target_id=target_id, rmse_fraction=float(rmse_fraction),
                              depth_sign=int(depth_sign), residual_px=float(residual_px),
                              seconds=float(seconds), n_points=int(n_points)))

    def fractions(self) -> np.ndarray:
        return np.array([r["rmse_fraction"] for r in self.rows])

    def write_csv(self, path, timing: bool = True):
        cols = ["target_id", "rmse_fraction", "depth_sign", "residual_px", "n_points"]
        if timing:
            cols.append("seconds")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in sorted(self.rows, key=lambda r: r["target_id"]):
                w.writerow([fmt(r[c]) for c in cols])


def reconstruction_error(points, truth, diameter: Optional[float] = None) -> tuple:
    """Similarity-aligned RMS error as a fraction of the object diameter, best depth sign.

    ``diameter`` should be that of the whole object; it defaults to the
    diameter of ``truth`` itself.
    """
    from scipy.spatial.distance import pdist

    truth = np.asarray(truth, float)
    rmse, sign, _ = procrustes_rmse_min_depth(np.asarray(points, float), truth)
    if diameter is None:
        diameter = float(pdist(truth).max())
    return rmse / float(diameter), int(sign)


def evaluate_reconstruction(tests: Collection, network: VVNetwork, compressed: CompressedNetwork,
                            ground_truth, cfg=None, poses=None, limit: Optional[int] = None
                            ) -> ReconErrorReport:
    """Reconstruct held-out targets and score the target points against their true 3D positions."""
    from .recon import TARGET, ReconConfig, reconstruct

    cfg = cfg or ReconConfig()
    insts = list(tests.instances)[: limit]
    poses = [t.camera for t in insts] if poses is None else list(poses)[: len(insts)]
    rep = ReconErrorReport()
    for t, p in zip(insts, poses):
        t0 = time.perf_counter()
        r = reconstruct(t, network, compressed, cfg, poses=[p])
        frac, sign = reconstruction_error(r.cloud.select(TARGET), ground_truth.grid_points3d(t.id),
                                          ground_truth.diameter(t.id))
        rep.add(t.id, frac, sign, r.report["residual_px"], time.perf_counter() - t0, len(r.cloud))
    return rep


# ---------------------------------------------------------------------------
# benchmark


@dataclass(frozen=True)
class BenchmarkReport:
    n_nodes: int
    n_instances: int
    n_queries: int
    compress_seconds: float
    fast_seconds: float
    dijkstra_seconds: float
    identical: bool

    @property
    def speedup(self) -> float:
        return self.dijkstra_seconds / self.fast_seconds if self.fast_seconds > 0 else float("inf")

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["speedup"] = self.speedup
        return d


def benchmark_alignment(network: VVNetwork, compressed: Optional[CompressedNetwork],
                        docking_sets: Sequence[DockingSet]) -> BenchmarkReport:
    """Time both aligners on the same inputs, checking they agree exactly.

    Raises ``AssertionError`` if any docking set aligns differently.
    """
    t0 = time.perf_counter()
    if compressed is None:
        compressed = compress_network(network)
    t_comp = time.perf_counter() - t0
    if docking_sets:
        # warm up the compiled kernels outside the timed region
        align_fast(compressed, docking_sets[0])
        align_dijkstra(network, docking_sets[0])
    t_fast = t_dij = 0.0
    for d in docking_sets:
        t0 = time.perf_counter()
        fast = align_fast(compressed, d)
        t_fast += time.perf_counter() - t0
        t0 = time.perf_counter()
        ref = align_dijkstra(network, d)
        t_dij += time.perf_counter() - t0
        if not fast.same_as(ref):
            raise AssertionError("fast alignment disagrees with the Dijkstra reference")
    return BenchmarkReport(network.n_nodes, network.n_instances, len(docking_sets), t_comp,
                           t_fast, t_dij, True)


def compress_network(network):
    from .network import compress
    return compress(network)
