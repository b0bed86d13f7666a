"""Single-object reconstruction from one or a few views plus an aligned collection.

The target's grid points are tracked into every network frame through the
alignment, keypoints and points interpolated between keypoints are added as
extra columns observed in the training frames only, and the partially
observed matrix is factorized with the target frames (and a few look-alike
neighbours) weighted up.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Camera, Collection, ObjectInstance, ValidationError
from .factorization import FactorizationResult, ObservationMatrix, factorize
from .geometry import mirror_camera, mirror_instance, pairwise_rotation_distance
from .network import AlignmentResult, CompressedNetwork, VVNetwork, align_fast, dock

log = logging.getLogger(__name__)

TARGET, TARGET_MIRRORED, SYNTHETIC_INLIER, TRAINING = 0, 1, 2, 3
LABEL_NAMES = ("target", "target-mirrored", "synthetic-inlier", "training")


@dataclass(frozen=True)
class ReconConfig:
    n_inliers_per_pair: int = 10
    resample_target_factor: float = 0.05
    resample_nn_factor: float = 0.02
    n_neighbors: int = 4
    neighbor_view_range: tuple = (30.0, 60.0)
    xy_snap: bool = True
    n_dock: int = 10
    mirror: bool = True
    include_keypoints: bool = True
    max_iters: int = 500
    tol: float = 1e-9

    def __post_init__(self):
        if self.n_inliers_per_pair < 0 or self.n_neighbors < 0 or self.n_dock < 1:
            raise ValidationError("ReconConfig: counts must be non-negative (n_dock >= 1)")
        if self.resample_target_factor < 0 or self.resample_nn_factor < 0:
            raise ValidationError("ReconConfig: resampling factors must be >= 0")
        lo, hi = self.neighbor_view_range
        if not 0 <= lo <= hi:
            raise ValidationError("ReconConfig: neighbor_view_range must be ordered")


@dataclass(eq=False)
class SyntheticInlierSet:
    """Points on segments between keypoint pairs, one column per (pair, alpha).

    Column ``c`` is pair ``c // n`` at ``alphas[c % n]``; ``points[i]`` and
    ``known[i]`` hold instance ``i``'s coordinates and availability.
    """

    pairs: np.ndarray  # (P, 2) keypoint indices u < v
    alphas: np.ndarray  # (n,)
    points: list
    known: list

    @property
    def n_columns(self) -> int:
        return len(self.pairs) * len(self.alphas)


def extrapolate_inliers(collection: Collection, n: int = 10) -> SyntheticInlierSet:
    """``alpha_t * m_u + (1 - alpha_t) * m_v`` for ``alpha_t = t / (n + 1)``, t = 1..n."""
    if n < 0:
        raise ValidationError("extrapolate_inliers: n must be >= 0")
    pairs = np.array(list(combinations(range(collection.n_keypoints), 2)), np.int64).reshape(-1, 2)
    alphas = np.arange(1, n + 1) / (n + 1)
    pts, known = [], []
    for inst in collection.instances:
        m = inst.keypoints.positions
        mu, mv = m[pairs[:, 0]], m[pairs[:, 1]]
        p = alphas[None, :, None] * mu[:, None, :] + (1 - alphas)[None, :, None] * mv[:, None, :]
        vis = inst.keypoints.visible[pairs[:, 0]] & inst.keypoints.visible[pairs[:, 1]]
        pts.append(p.reshape(-1, 2))
        known.append(np.repeat(vis, n))
    return SyntheticInlierSet(pairs, alphas, pts, known)


@dataclass(eq=False)
class Assembly:
    """Observation matrix plus its column/row layout."""

    obs: ObservationMatrix
    n_target_frames: int
    target_columns: list  # slice per target view
    keypoint_columns: slice
    inlier_columns: slice

    @property
    def n_target_points(self) -> int:
        return sum(s.stop - s.start for s in self.target_columns)


def assemble_observation(targets: Sequence, collection: Collection,
                         inliers: Optional[SyntheticInlierSet] = None,
                         include_keypoints: bool = True) -> Assembly:
    """Stack target frames over collection frames.

    ``targets`` is a list of ``(ObjectInstance, AlignmentResult)`` whose
    alignments refer to ``collection``'s instances. Each target view owns a
    block of columns, known in its own frame and, through the alignment, in
    every collection frame holding a match. Keypoint and inlier columns are
    known in collection frames only.
    """
    if not targets:
        raise ValidationError("assemble_observation: no targets")
    J = len(collection)
    sizes = [len(inst.grid) for inst in collection.instances]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    flat = np.concatenate([inst.grid.points for inst in collection.instances]) if J else np.zeros((0, 2))
    T = len(targets)
    n_tp = [len(t.grid) for t, _ in targets]
    Z = collection.n_keypoints if include_keypoints else 0
    n_inl = inliers.n_columns if inliers is not None else 0
    K = sum(n_tp) + Z + n_inl
    F = T + J
    V = np.zeros((F, K, 2))
    M = np.zeros((F, K), bool)
    cols, c0 = [], 0
    for ti, ((inst, al), n) in enumerate(zip(targets, n_tp)):
        if not isinstance(al, AlignmentResult) or al.match_node.shape != (n, J):
            raise ValidationError("assemble_observation: alignment does not match target and collection")
        if not np.array_equal(al.offsets, offsets):
            raise ValidationError("assemble_observation: alignment refers to a different collection")
        sl = slice(c0, c0 + n)
        V[ti, sl] = inst.grid.points
        M[ti, sl] = True
        g = al.match_node.T  # (J, n)
        ok = g >= 0
        V[T:, sl][ok] = flat[g[ok]]
        M[T:, sl] = ok
        cols.append(sl)
        c0 += n
    kp = slice(c0, c0 + Z)
    for j, inst in enumerate(collection.instances):
        if Z:
            V[T + j, kp] = inst.keypoints.positions
            M[T + j, kp] = inst.keypoints.visible
    inl = slice(kp.stop, kp.stop + n_inl)
    if n_inl:
        if len(inliers.points) != J:
            raise ValidationError("assemble_observation: inlier set does not cover the collection")
        for j in range(J):
            V[T + j, inl] = inliers.points[j]
            M[T + j, inl] = inliers.known[j]
    values = np.empty((2 * F, K))
    values[0::2] = V[..., 0]
    values[1::2] = V[..., 1]
    known = np.repeat(M, 2, axis=0)
    values[~known] = 0.0
    return Assembly(ObservationMatrix(values, known), T, cols, kp, inl)


def angular_distance_deg(pose: Camera, cameras) -> np.ndarray:
    R = np.stack([c.rotation for c in cameras])
    return np.degrees(pairwise_rotation_distance(pose.rotation[None], R)[0] / math.sqrt(2.0))


def select_neighbors(target: ObjectInstance, collection: Collection, pose: Camera,
                     cfg: ReconConfig = ReconConfig(), widen_step: float = 15.0) -> np.ndarray:
    """Indices of the ``cfg.n_neighbors`` look-alikes at a moderate viewpoint change.

    Candidates are instances whose viewpoint differs from ``pose`` by an
    angle inside ``cfg.neighbor_view_range``; they are ranked by euclidean
    distance between pooled descriptors. An empty range is widened by
    ``widen_step`` degrees on both sides until something qualifies.
    """
    if cfg.n_neighbors == 0 or len(collection) == 0:
        return np.zeros(0, np.int64)
    ang = angular_distance_deg(pose, [i.camera for i in collection.instances])
    lo, hi = cfg.neighbor_view_range
    while True:
        cand = np.flatnonzero((ang >= lo) & (ang <= hi))
        if cand.size or (lo <= 0 and hi >= 180):
            break
        log.warning("no neighbours within %.0f-%.0f degrees; widening", lo, hi)
        lo, hi = max(0.0, lo - widen_step), min(180.0, hi + widen_step)
    g = target.pooled_descriptor()
    d = np.array([np.linalg.norm(collection.instances[i].pooled_descriptor() - g) for i in cand])
    return cand[np.argsort(d, kind="stable")[: cfg.n_neighbors]]


def resample_count(factor: float, collection_size: int) -> int:
    """``max(1, round(factor * size))`` rounding halves away from zero."""
    return max(1, int(math.floor(factor * collection_size + 0.5)))


def apply_resampling(obs: ObservationMatrix, target_frames, nn_frames, collection_size: int,
                     cfg: ReconConfig = ReconConfig()) -> ObservationMatrix:
    w = np.ones(obs.n_frames)
    nn = np.asarray(nn_frames, np.int64)
    tf = np.asarray(target_frames, np.int64)
    for f in np.concatenate([nn, tf]):
        if not 0 <= f < obs.n_frames:
            raise ValidationError(f"apply_resampling: frame {f} out of range")
    w[nn] = resample_count(cfg.resample_nn_factor, collection_size)
    w[tf] = resample_count(cfg.resample_target_factor, collection_size)
    return obs.with_weights(w)


def xy_snap(result: FactorizationResult, target_columns, reference_frame: int, original_points,
            mirror_columns=None, mirror_table=None) -> FactorizationResult:
    """Move target points so the reference camera sees them exactly at ``original_points``.

    Each point moves inside the reference image plane, so its depth along the
    viewing axis is kept. Mirrored-view points, given as columns plus the
    mirror correspondence table, move by the same 3D offset as their original
    counterparts.
    """
    cols = np.asarray(target_columns, np.int64)
    m = np.asarray(original_points, float).reshape(-1, 2)
    if len(cols) != len(m):
        raise ValidationError("xy_snap: one original point per target column required")
    mot = result.motions[reference_frame]
    R = np.asarray(mot.rotation)
    X = result.shape.copy()
    proj = mot.scale * (R[:2] @ X[:, cols]) + mot.translation[:, None]
    delta = (m.T - proj) / mot.scale  # image-plane offset in model units
    offset3d = R[:2].T @ delta
    X[:, cols] += offset3d
    if mirror_columns is not None:
        if mirror_table is None:
            raise ValidationError("xy_snap: mirrored view without a correspondence table")
        mc = np.asarray(mirror_columns, np.int64)
        table = np.asarray(mirror_table, np.int64)
        if len(table) != len(cols) or np.any(table < 0) or np.any(table >= len(mc)):
            raise ValidationError("xy_snap: mirror table does not match the target columns")
        X[:, mc[table]] += offset3d
    out = FactorizationResult(X, result.motions, result.completed, result.residual,
                              result.iterations, result.converged, result.history)
    return out


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3)
    labels: np.ndarray  # (n,) codes into LABEL_NAMES
    source: list  # (instance id, point index) per point

    def __post_init__(self):
        self.points = np.asarray(self.points, float).reshape(-1, 3)
        self.labels = np.asarray(self.labels, np.uint8)
        if len(self.labels) != len(self.points) or len(self.source) != len(self.points):
            raise ValidationError("PointCloud: points, labels and sources differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("PointCloud: non-finite coordinates")
        if np.any(self.labels >= len(LABEL_NAMES)):
            raise ValidationError("PointCloud: unknown label")

    def __len__(self):
        return len(self.points)

    def select(self, label: int) -> np.ndarray:
        return self.points[self.labels == label]


def to_reference_frame(X, motion, sign: float = 1.0) -> np.ndarray:
    """``(3, K)`` model points -> ``(K, 3)`` reference pixels plus scaled depth."""
    R = np.asarray(motion.rotation)
    q = motion.scale * (R @ X)
    q[:2] += np.asarray(motion.translation)[:, None]
    q[2] *= sign
    return q.T


@dataclass(eq=False)
class ReconResult:
    cloud: PointCloud
    factorization: FactorizationResult
    assembly: Assembly
    pre_snap: np.ndarray  # (K_target, 3) reference-frame points before snapping
    report: dict = field(default_factory=dict)


def reconstruct(targets, network: VVNetwork, compressed: CompressedNetwork,
                cfg: ReconConfig = ReconConfig(), poses=None, alignments=None) -> ReconResult:
    """Reconstruct one object seen in ``targets`` (an instance or a list of views).

    ``poses`` defaults to the targets' own cameras (oracle viewpoint).
    ``alignments`` (one per view, mirror included) bypasses docking. A
    single view is paired with its mirror image unless ``cfg.mirror`` is off.
    Output points are in the first view's frame: x, y in its pixels, z the
    scaled depth, with the sign chosen so the visible points face the camera.
    """
    t0 = time.perf_counter()
    if isinstance(targets, ObjectInstance):
        targets = [targets]
    targets = list(targets)
    if not targets:
        raise ValidationError("reconstruct: no target views")
    coll = network.collection
    if coll is None:
        raise ValidationError("reconstruct: network has no collection attached")
    if poses is None:
        poses = [t.camera for t in targets]
    poses = list(poses)
    if any(p is None for p in poses):
        raise ValidationError("reconstruct: a target view has no pose")
    labels = [TARGET] * len(targets)
    mirrored = False
    if len(targets) == 1 and cfg.mirror:
        if coll.symmetry_swap is None or len(coll.symmetry_swap) == 0:
            raise ValidationError("reconstruct: mirroring needs a symmetry swap table")
        mt = mirror_instance(targets[0], coll.symmetry_swap)
        targets.append(mt)
        poses.append(mirror_camera(poses[0], targets[0].width))
        labels.append(TARGET_MIRRORED)
        mirrored = True

    if alignments is None:
        alignments = [align_fast(compressed, dock(t, network, p, cfg.n_dock)) for t, p in zip(targets, poses)]
    if len(alignments) != len(targets):
        raise ValidationError("reconstruct: one alignment per target view required")
    views = list(zip(targets, alignments))
    t_align = time.perf_counter()

    inliers = extrapolate_inliers(coll, cfg.n_inliers_per_pair) if cfg.n_inliers_per_pair else None
    asm = assemble_observation(views, coll, inliers, cfg.include_keypoints)
    T = asm.n_target_frames
    nn = []
    for t, p in zip(targets, poses):
        nn.extend(T + select_neighbors(t, coll, p, cfg))
    nn = sorted(set(int(f) for f in nn))
    obs = apply_resampling(asm.obs, np.arange(T), nn, len(coll), cfg)
    # drop columns seen in fewer than two frames (unmatched target points)
    seen = obs.frame_known.sum(0)
    keep = seen >= 2
    if not np.all(keep[: asm.n_target_points]):
        log.warning("%d target points have no match in any frame", int((~keep[: asm.n_target_points]).sum()))
    sub = ObservationMatrix(obs.values[:, keep], obs.known[:, keep], obs.row_weights)
    res = factorize(sub, max_iters=cfg.max_iters, tol=cfg.tol)
    X = np.full((3, obs.n_points), np.nan)
    X[:, keep] = res.shape
    res = FactorizationResult(X, res.motions, res.completed, res.residual, res.iterations,
                              res.converged, res.history)
    t_fact = time.perf_counter()

    tcols = np.concatenate([np.arange(s.start, s.stop) for s in asm.target_columns])
    if not np.all(keep[tcols]):
        # unobserved target points: put them at the depth of the shape centroid
        miss = tcols[~keep[tcols]]
        X[:, miss] = 0.0
    ref = res.motions[0]
    # sign convention: visible points in front of the shape centroid
    q = to_reference_frame(res.shape[:, keep], ref)
    depth_t = to_reference_frame(X[:, asm.target_columns[0]], ref)[:, 2]
    sign = 1.0 if np.mean(depth_t) <= np.mean(q[:, 2]) else -1.0
    pre = to_reference_frame(X[:, tcols], ref, sign)
    if cfg.xy_snap:
        c0 = asm.target_columns[0]
        mc = mt_table = None
        if mirrored:
            mc = np.arange(asm.target_columns[1].start, asm.target_columns[1].stop)
            mt_table = targets[1].mirror_table
        res = xy_snap(res, np.arange(c0.start, c0.stop), 0, targets[0].grid.points, mc, mt_table)
    pts = to_reference_frame(res.shape[:, tcols], ref, sign)
    lab = np.concatenate([np.full(len(t.grid), l) for t, l in zip(targets, labels)])
    src = [(t.id, k) for t in targets for k in range(len(t.grid))]
    cloud = PointCloud(pts, lab, src)
    report = {
        "targets": [t.id for t in targets],
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "n_frames": obs.n_frames,
        "n_columns": int(keep.sum()),
        "n_dropped_columns": int((~keep).sum()),
        "neighbor_frames": [coll.instances[f - T].id for f in nn],
        "target_weight": resample_count(cfg.resample_target_factor, len(coll)),
        "neighbor_weight": resample_count(cfg.resample_nn_factor, len(coll)),
        "residual_px": res.residual,
        "iterations": res.iterations,
        "converged": res.converged,
        "depth_sign": sign,
        "seconds": {"align": t_align - t0, "factorize": t_fact - t_align,
                    "total": time.perf_counter() - t0},
    }
    return ReconResult(cloud, res, asm, pre, report)


def write_ply(cloud: PointCloud, path, comments=()):
    """ASCII PLY: ``x y z label``; point sources go into comment lines."""
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines += [f"comment label {i} {n}" for i, n in enumerate(LABEL_NAMES)]
    lines += [f"comment source {k} {sid} {idx}" for k, (sid, idx) in enumerate(cloud.source)]
    lines += [f"element vertex {len(cloud)}", "property double x", "property double y",
              "property double z", "property uchar label", "end_header"]
    body = [f"{x!r} {y!r} {z!r} {l}" for (x, y, z), l in zip(cloud.points.tolist(), cloud.labels.tolist())]
    Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValidationError(f"{path}: not a PLY file")
    n, src, i = None, {}, 1
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts[:2] == ["comment", "source"]:
            src[int(parts[2])] = (parts[3], int(parts[4]))
        i += 1
    rows = [line.split() for line in text[i + 1: i + 1 + n]]
    pts = np.array([[float(v) for v in r[:3]] for r in rows]).reshape(-1, 3)
    lab = np.array([int(r[3]) for r in rows], np.uint8)
    return PointCloud(pts, lab, [src.get(k, ("", -1)) for k in range(n)])


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
