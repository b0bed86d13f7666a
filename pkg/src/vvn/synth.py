"""Synthetic object classes with full ground truth.

Each class is a union of ellipsoids, mirror symmetric about the plane x = 0
(x lateral, y along the object, z up). Surface samples are the grid points:
an instance deforms the shape slightly, picks a camera, keeps the points
whose outward normal faces the camera and projects them. Descriptors embed
each point's canonical position, so true correspondences have similar
descriptors across instances; an optional view-dependent term makes them
drift as the viewpoint changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .core import (
    Camera, Collection, FeatureGrid, KeypointSet, ObjectInstance, ValidationError,
    rasterize_polygon,
)
from .geometry import REFLECT_X, project, rotation_from_axis_angle

# world (x lateral, y forward, z up) -> camera (x right, y down, z away) at azimuth 0
CANONICAL_VIEW = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
MARGIN = 8
BOX_HEIGHT = 150


@dataclass(frozen=True)
class Part:
    center: tuple
    radii: tuple


@dataclass(frozen=True)
class KeypointSpec:
    name: str
    part: int
    direction: tuple


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Symmetric sampled surface.

    ``point_mirror[k]`` is the index of the x-negated point of ``k``;
    ``symmetry_swap`` is the same relation restricted to keypoints.
    ``deformation_modes`` has shape (n_modes, K, 3).
    """

    class_id: str
    base_points: np.ndarray
    normals: np.ndarray
    point_mirror: np.ndarray
    keypoint_indices: np.ndarray
    keypoint_names: tuple
    symmetry_swap: np.ndarray
    deformation_modes: np.ndarray
    parts: tuple = ()
    keypoint_specs: tuple = ()

    def __post_init__(self):
        P = self.base_points
        if not np.allclose(P[self.point_mirror], P @ REFLECT_X, atol=1e-12):
            raise ValidationError(f"model {self.class_id}: surface is not mirror symmetric")
        kp = self.keypoint_indices
        if not np.array_equal(self.point_mirror[kp], kp[self.symmetry_swap]):
            raise ValidationError(f"model {self.class_id}: keypoint swap inconsistent with the surface")
        for mode in self.deformation_modes:
            if not np.allclose(mode[self.point_mirror], mode @ REFLECT_X, atol=1e-12):
                raise ValidationError(f"model {self.class_id}: asymmetric deformation mode")

    @property
    def n_points(self) -> int:
        return len(self.base_points)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_indices)

    def resample(self, n_points: int) -> "ShapeModel":
        return build_model(self.class_id, self.parts, self.keypoint_specs, n_points)

    def diameter(self) -> float:
        return _diameter(self.base_points)


def _diameter(P):
    return float(pdist(P).max())


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = math.pi * (3 - math.sqrt(5)) * i
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def _ellipsoid_area(r):
    a, b, c = r
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _inside(points, part, shrink=0.999):
    c, r = np.asarray(part.center), np.asarray(part.radii)
    return np.sum(((points - c) / r) ** 2, axis=1) < shrink


def _surface_point(part, direction):
    c, r = np.asarray(part.center, float), np.asarray(part.radii, float)
    d = np.asarray(direction, float)
    d = d / np.linalg.norm(d / r)
    return c + d


def _normal(part, p):
    c, r = np.asarray(part.center, float), np.asarray(part.radii, float)
    n = (p - c) / r ** 2
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _mirror_part(part):
    return Part((-part.center[0],) + tuple(part.center[1:]), part.radii)


def build_model(class_id, parts, keypoint_specs, n_points=300) -> ShapeModel:
    """Sample the union surface of ``parts`` and reflect it.

    Parts with ``center[0] > 0`` get a mirrored twin at ``-x``; parts centred on
    the midline are sampled on their ``x >= 0`` half only, then reflected.
    Keypoints are exact surface points added to the sample; a keypoint with
    ``direction[0] == 0`` on a midline part is its own mirror.
    """
    parts = tuple(parts)
    all_parts = list(parts) + [_mirror_part(p) for p in parts if p.center[0] > 0]
    areas = np.array([_ellipsoid_area(p.radii) * (0.5 if p.center[0] == 0 else 1.0) for p in parts])
    # per-part budgets for the x >= 0 half (total surface points ~ n_points)
    budget = np.maximum(4, np.round(areas / areas.sum() * n_points / 2)).astype(int)
    half, half_n = [], []
    for p, m in zip(parts, budget):
        if p.center[0] == 0:
            d = _fibonacci_sphere(2 * m)
            d = d[d[:, 0] > 1e-3]
        else:
            d = _fibonacci_sphere(m)
        pts = np.asarray(p.center) + d * np.asarray(p.radii)
        keep = np.ones(len(pts), bool)
        for q in all_parts:
            if q is not p:
                keep &= ~_inside(pts, q)
        half.append(pts[keep])
        half_n.append(_normal(p, pts[keep]))
    half = np.concatenate(half)
    half_n = np.concatenate(half_n)

    kp_pts, kp_n, kp_self = [], [], []
    for spec in keypoint_specs:
        part = parts[spec.part]
        x = _surface_point(part, spec.direction)
        kp_pts.append(x)
        kp_n.append(_normal(part, x))
        kp_self.append(part.center[0] == 0 and spec.direction[0] == 0)
    kp_pts = np.array(kp_pts)
    kp_n = np.array(kp_n)
    kp_self = np.array(kp_self)
    if np.any(kp_pts[~kp_self, 0] <= 0):
        raise ValidationError(f"model {class_id}: lateral keypoints must lie at x > 0")

    # layout: [mid keypoints] [half surface] [lateral keypoints] [mirrored half] [mirrored lateral kps]
    mid = kp_pts[kp_self]
    lat = kp_pts[~kp_self]
    pos_half = np.concatenate([half, lat])
    nrm_half = np.concatenate([half_n, kp_n[~kp_self]])
    n_mid, n_half = len(mid), len(pos_half)
    P = np.concatenate([mid, pos_half, pos_half @ REFLECT_X])
    N = np.concatenate([kp_n[kp_self], nrm_half, nrm_half @ REFLECT_X])
    P[:n_mid, 0] = 0.0
    N[:n_mid, 0] = 0.0
    N[:n_mid] /= np.linalg.norm(N[:n_mid], axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_mid), n_mid + n_half + np.arange(n_half), n_mid + np.arange(n_half)])

    # keypoints: each lateral spec gives a right/left pair, named with suffixes
    names, kidx = [], []
    mid_i = lat_i = 0
    for spec, is_self in zip(keypoint_specs, kp_self):
        if is_self:
            names.append(spec.name)
            kidx.append(mid_i)
            mid_i += 1
        else:
            k = n_mid + len(half) + lat_i
            names += [spec.name + "_left", spec.name + "_right"]
            kidx += [k, mirror[k]]
            lat_i += 1
    kidx = np.array(kidx)
    pos = {k: z for z, k in enumerate(kidx)}
    swap = np.array([pos[mirror[k]] for k in kidx])
    return ShapeModel(class_id, P, N, mirror, kidx, tuple(names), swap, _deformation_modes(P),
                      parts, tuple(keypoint_specs))


def _deformation_modes(P):
    """Symmetric smooth fields: axis stretches, taper and bends, each of unit RMS norm."""
    x, y, z = P.T
    zc = z - z.mean()
    zero = np.zeros_like(x)
    modes = [
        np.column_stack([x, zero, zero]),
        np.column_stack([zero, y, zero]),
        np.column_stack([zero, zero, zc]),
        np.column_stack([x * y, zero, zero]),
        np.column_stack([zero, zero, y * y - np.mean(y * y)]),
        np.column_stack([x * zc, zero, zero]),
    ]
    out = []
    for m in modes:
        rms = np.sqrt(np.mean(np.sum(m * m, axis=1)))
        out.append(m / rms if rms > 0 else m)
    return np.stack(out)


def builtin_models(n_points: int = 300) -> list:
    """The car, aeroplane and boat classes."""
    car = build_model(
        "car",
        [Part((0, 0, 0.32), (0.45, 1.0, 0.26)),
         Part((0, -0.1, 0.62), (0.36, 0.55, 0.17)),
         Part((0.42, 0.6, 0.18), (0.08, 0.18, 0.18)),
         Part((0.42, -0.6, 0.18), (0.08, 0.18, 0.18))],
        [KeypointSpec("front_bumper", 0, (0, 1, 0)),
         KeypointSpec("headlight", 0, (0.5, 1, 0.25)),
         KeypointSpec("taillight", 0, (0.5, -1, 0.25)),
         KeypointSpec("front_wheel", 2, (1, 0, 0)),
         KeypointSpec("back_wheel", 3, (1, 0, 0)),
         KeypointSpec("roof_front", 1, (0.5, 0.6, 0.7))],
        n_points)
    aeroplane = build_model(
        "aeroplane",
        [Part((0, 0, 0), (0.17, 1.0, 0.17)),
         Part((0.55, 0.05, 0), (0.55, 0.2, 0.05)),
         Part((0, -0.82, 0.24), (0.04, 0.16, 0.26)),
         Part((0.22, -0.85, 0.02), (0.22, 0.1, 0.035))],
        [KeypointSpec("nose", 0, (0, 1, 0)),
         KeypointSpec("tail", 0, (0, -1, 0)),
         KeypointSpec("fin_top", 2, (0, 0, 1)),
         KeypointSpec("wing_tip", 1, (1, 0, 0)),
         KeypointSpec("wing_front", 1, (0.2, 1, 0.3)),
         KeypointSpec("stabilizer_tip", 3, (1, 0, 0))],
        n_points)
    boat = build_model(
        "boat",
        [Part((0, 0, 0.1), (0.3, 1.0, 0.18)),
         Part((0, -0.2, 0.35), (0.18, 0.32, 0.15)),
         Part((0, 0.15, 0.62), (0.035, 0.035, 0.45))],
        [KeypointSpec("bow", 0, (0, 1, 0)),
         KeypointSpec("stern", 0, (0, -1, 0)),
         KeypointSpec("mast_top", 2, (0, 0, 1)),
         KeypointSpec("hull_front", 0, (1, 0.6, 0.3)),
         KeypointSpec("hull_back", 0, (1, -0.6, 0.3)),
         KeypointSpec("cabin_front", 1, (1, 1, 1)),
         KeypointSpec("cabin_back", 1, (1, -1, 1))],
        n_points)
    return [car, aeroplane, boat]


def get_model(name: str, n_points: int = 300) -> ShapeModel:
    for m in builtin_models(n_points):
        if m.class_id == name:
            return m
    raise ValidationError(f"unknown model {name!r}; choose from car, aeroplane, boat")


@dataclass(frozen=True)
class SynthConfig:
    n_instances: int = 100
    n_grid_points: int = 300
    descriptor_dim: int = 32
    descriptor_noise_sigma: float = 0.1
    keypoint_noise_sigma_px: float = 1.0
    deformation_scale: float = 0.05
    view_dependence: float = 0.5
    descriptor_length_scale: float = 0.3
    occlusion: bool = True
    symmetric_descriptors: bool = True
    azimuth_range_deg: tuple = (0.0, 360.0)
    elevation_mean_deg: float = 12.0
    elevation_std_deg: float = 8.0
    roll_std_deg: float = 3.0
    visibility_threshold: float = 0.05
    seed: int = 0
    first_index: int = 0

    def __post_init__(self):
        if self.n_instances < 0 or self.descriptor_dim < 1:
            raise ValidationError("SynthConfig: n_instances >= 0 and descriptor_dim >= 1 required")
        if min(self.descriptor_noise_sigma, self.keypoint_noise_sigma_px, self.deformation_scale,
               self.view_dependence) < 0 or not self.descriptor_length_scale > 0:
            raise ValidationError("SynthConfig: noise levels and scales must be non-negative")


@dataclass(eq=False)
class GroundTruth:
    """Per generated instance: deformed 3D points, camera and grid-to-surface map."""

    class_id: str
    ids: tuple
    points3d: np.ndarray  # (N, K, 3)
    cameras: list
    point_ids: list  # per instance: surface index of every grid point
    keypoint_indices: np.ndarray
    point_mirror: np.ndarray

    def index_of(self, instance_id: str) -> int:
        base = instance_id[: -len("#mirror")] if instance_id.endswith("#mirror") else instance_id
        try:
            return self.ids.index(base)
        except ValueError:
            raise KeyError(instance_id) from None

    def surface_ids(self, instance_id: str) -> np.ndarray:
        """Surface index of each grid point; mirrored views map through the symmetry."""
        ids = self.point_ids[self.index_of(instance_id)]
        return self.point_mirror[ids] if instance_id.endswith("#mirror") else ids

    def grid_points3d(self, instance_id: str) -> np.ndarray:
        i = self.index_of(instance_id)
        return self.points3d[i][self.point_ids[i]]

    def correspondence(self, id_a: str, id_b: str) -> np.ndarray:
        """For each grid point of ``a``: the grid index in ``b`` of the same surface point, or -1."""
        sa, sb = self.surface_ids(id_a), self.surface_ids(id_b)
        lookup = np.full(len(self.point_mirror), -1)
        lookup[sb] = np.arange(len(sb))
        return lookup[sa]

    def diameter(self, instance_id: str) -> float:
        return _diameter(self.points3d[self.index_of(instance_id)])

    def merged(self, other: "GroundTruth") -> "GroundTruth":
        return GroundTruth(self.class_id, self.ids + other.ids,
                           np.concatenate([self.points3d, other.points3d]),
                           list(self.cameras) + list(other.cameras),
                           list(self.point_ids) + list(other.point_ids),
                           self.keypoint_indices, self.point_mirror)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def camera_rotation(azimuth, elevation, roll) -> np.ndarray:
    """``Roll @ Elevation @ CANONICAL_VIEW @ Rz(azimuth)``, angles in radians."""
    Rz = rotation_from_axis_angle([0, 0, 1], azimuth)
    Re = rotation_from_axis_angle([1, 0, 0], elevation)
    Rr = rotation_from_axis_angle([0, 0, 1], roll)
    return Rr @ Re @ CANONICAL_VIEW @ Rz


def descriptor_embedding(cfg: SynthConfig):
    """Random Fourier features: frequencies ``(D, 6)`` and phases ``(D,)``.

    The first three frequency columns act on canonical surface position and
    are scaled by ``1 / descriptor_length_scale``, so descriptors decorrelate
    over that distance; the last three act on the camera-frame normal.
    """
    rng = _rng(cfg.seed, 0)
    W = rng.standard_normal((cfg.descriptor_dim, 6))
    W[:, :3] /= cfg.descriptor_length_scale
    phase = rng.uniform(0, 2 * math.pi, cfg.descriptor_dim)
    return W, phase


def point_features(model: ShapeModel, ids, R, cfg: SynthConfig) -> np.ndarray:
    """Canonical position and camera-frame normal of surface points, before embedding."""
    X = model.base_points[ids].copy()
    if cfg.symmetric_descriptors:
        X[:, 0] = np.abs(X[:, 0])
    n = model.normals[ids] @ R.T
    n[:, 0] = np.abs(n[:, 0])  # unchanged by left-right image flips
    return np.hstack([X, cfg.view_dependence * n])


def generate_instance(model: ShapeModel, cfg: SynthConfig, index: int, embedding=None):
    """One instance; returns ``(ObjectInstance, points3d, camera, point_ids)``."""
    A, b = embedding if embedding is not None else descriptor_embedding(cfg)
    rng = _rng(cfg.seed, 1, index)
    coeffs = rng.uniform(-1, 1, len(model.deformation_modes)) * cfg.deformation_scale
    P = model.base_points + np.tensordot(coeffs, model.deformation_modes, axes=1)
    az = math.radians(rng.uniform(*cfg.azimuth_range_deg))
    el = math.radians(np.clip(rng.normal(cfg.elevation_mean_deg, cfg.elevation_std_deg), -30, 80))
    roll = math.radians(rng.normal(0, cfg.roll_std_deg))
    R = camera_rotation(az, el, roll)
    facing = (model.normals @ R.T)[:, 2] < -cfg.visibility_threshold
    if cfg.occlusion:
        facing &= ~_occluded(model, R)
    ids = np.flatnonzero(facing)
    if len(ids) < 3:
        raise ValidationError(f"instance {index}: fewer than 3 visible surface points")
    q = P @ R[:2].T
    lo, hi = q[ids].min(0), q[ids].max(0)
    s = (BOX_HEIGHT - 1) / (hi[1] - lo[1])
    t = MARGIN + 0.5 - s * lo
    cam = Camera(R, s, t)
    grid = project(cam, P[ids])
    w = int(math.ceil(s * (hi[0] - lo[0]))) + 2 * MARGIN + 1
    h = BOX_HEIGHT + 2 * MARGIN
    mask = _silhouette(grid, (h, w))

    feats = point_features(model, ids, R, cfg)
    desc = math.sqrt(2) * np.cos(feats @ A.T + b) + cfg.descriptor_noise_sigma * rng.standard_normal((len(ids), cfg.descriptor_dim))

    kidx = model.keypoint_indices
    kvis = facing[kidx]
    kpos = project(cam, P[kidx]) + cfg.keypoint_noise_sigma_px * rng.standard_normal((len(kidx), 2))
    kpos = np.clip(kpos, 0, [w, h])
    kpos[~kvis] = 0.0
    inst = ObjectInstance(
        id=str(index),
        image_size=(w, h),
        mask=mask,
        grid=FeatureGrid(grid, desc),
        keypoints=KeypointSet(model.keypoint_names, kpos, kvis),
        camera=cam,
    )
    return inst, P, cam, ids


def _occluded(model: ShapeModel, R, eps=1e-9):
    """Points whose ray towards the camera enters one of the model's ellipsoids."""
    P = model.base_points
    d = -R[2]
    hidden = np.zeros(len(P), bool)
    for part in model.parts:
        r = np.asarray(part.radii, float)
        o = (P - np.asarray(part.center, float)) / r
        v = d / r
        a = v @ v
        b = o @ v
        c = np.sum(o * o, axis=1) - 1
        disc = b * b - a * c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - root) / a
        hidden |= hit & (t0 > eps)
    return hidden


def _silhouette(points, shape):
    h, w = shape
    try:
        hull = ConvexHull(points)
        mask = rasterize_polygon(points[hull.vertices], shape)
    except QhullError:
        mask = np.zeros(shape, bool)
    c = np.clip(np.floor(points[:, 0]).astype(int), 0, w - 1)
    r = np.clip(np.floor(points[:, 1]).astype(int), 0, h - 1)
    mask[r, c] = True
    return mask


def generate(model: ShapeModel, cfg: SynthConfig):
    """Collection of ``cfg.n_instances`` views plus ground truth.

    Instance ``i`` draws from its own seed stream ``(seed, i)`` with ``i``
    counted from ``cfg.first_index``; ids are the decimal indices.
    """
    if model.n_points != cfg.n_grid_points and model.parts:
        model = model.resample(cfg.n_grid_points)
    emb = descriptor_embedding(cfg)
    insts, pts, cams, pids = [], [], [], []
    for i in range(cfg.first_index, cfg.first_index + cfg.n_instances):
        inst, P, cam, ids = generate_instance(model, cfg, i, emb)
        insts.append(inst)
        pts.append(P)
        cams.append(cam)
        pids.append(ids)
    coll = Collection(model.class_id, insts, model.symmetry_swap, model.keypoint_names)
    gt = GroundTruth(model.class_id, tuple(i.id for i in insts),
                     np.array(pts).reshape(-1, model.n_points, 3), cams, pids,
                     model.keypoint_indices.copy(), model.point_mirror.copy())
    return coll, gt


def split(collection: Collection, n_test: int):
    """Last ``n_test`` instances held out: ``(train, test)``."""
    if not 0 <= n_test < len(collection):
        raise ValidationError("split: need 0 <= n_test < collection size")
    cut = len(collection) - n_test
    return (collection.with_instances(collection.instances[:cut]),
            collection.with_instances(collection.instances[cut:]))


def ground_truth_path(collection_path) -> Path:
    p = Path(collection_path)
    return p.with_name(p.name + ".gt.npz")


def save_ground_truth(gt: GroundTruth, path):
    sizes = np.array([len(p) for p in gt.point_ids])
    with open(path, "wb") as fh:
        np.savez(
            fh,
            class_id=np.array(gt.class_id),
            ids=np.array(gt.ids, dtype=str),
            points3d=gt.points3d,
            rotations=np.array([c.rotation for c in gt.cameras]).reshape(-1, 3, 3),
            scales=np.array([c.scale for c in gt.cameras]),
            translations=np.array([c.translation for c in gt.cameras]).reshape(-1, 2),
            point_ids=np.concatenate(gt.point_ids) if gt.point_ids else np.zeros(0, int),
            sizes=sizes,
            keypoint_indices=gt.keypoint_indices,
            point_mirror=gt.point_mirror,
        )


def load_ground_truth(path) -> GroundTruth:
    with np.load(path, allow_pickle=False) as z:
        cams = [Camera(R, s, t) for R, s, t in zip(z["rotations"], z["scales"], z["translations"])]
        cuts = np.cumsum(z["sizes"])[:-1]
        return GroundTruth(str(z["class_id"]), tuple(str(s) for s in z["ids"]), z["points3d"], cams,
                           list(np.split(z["point_ids"], cuts)), z["keypoint_indices"], z["point_mirror"])
