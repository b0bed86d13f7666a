"""Domain data model and collection serialization.

All types are frozen dataclasses holding read-only numpy arrays. Coordinates are
image pixels with the origin at the top-left corner; pixel ``(r, c)`` of a mask
covers the square ``[c, c + 1) x [r, r + 1)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

FORMAT_NAME = "vvn-collection"
FORMAT_VERSION = 1
DEFAULT_HEIGHT = 150.0
DEFAULT_STRIDE = 8.0
ROTATION_TOL = 1e-9


class ValidationError(ValueError):
    """Input data violates a schema rule or a type invariant."""


class NumericalError(ArithmeticError):
    """A numerical routine could not produce a meaningful answer."""


def _frozen(a, dtype=float, ndim=None, name="array"):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if a is None or b is None:
            return False
        return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)
    return a == b


class _ArrayEq:
    """Field-wise equality that treats numpy arrays by exact value."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(_same(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Keypoint:
    name: str
    position: tuple
    visible: bool


@dataclass(frozen=True, eq=False)
class KeypointSet(_ArrayEq):
    """Ordered keypoints of one view. Missing keypoints sit at (0, 0) with visible False."""

    names: tuple
    positions: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        pos.flags.writeable = False
        vis = _frozen(self.visible, dtype=bool, ndim=1, name="keypoint visible")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "visible", vis)
        if not (len(self.names) == len(pos) == len(vis)):
            raise ValidationError("keypoints: names, positions and visible differ in length")
        if not np.all(np.isfinite(pos[vis])):
            raise ValidationError("keypoints: non-finite position on a visible keypoint")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, i) -> Keypoint:
        return Keypoint(self.names[i], tuple(self.positions[i]), bool(self.visible[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_keypoints(cls, kps: Sequence[Keypoint]) -> "KeypointSet":
        return cls(
            [k.name for k in kps],
            np.array([k.position if k.visible else (0.0, 0.0) for k in kps], float).reshape(-1, 2),
            [k.visible for k in kps],
        )


@dataclass(frozen=True, eq=False)
class FeatureGrid(_ArrayEq):
    points: np.ndarray
    descriptors: np.ndarray
    stride: float = DEFAULT_STRIDE

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 2)
        desc = np.array(self.descriptors, dtype=float)
        if desc.ndim == 1 and desc.size == 0:
            desc = desc.reshape(0, 0)
        if desc.ndim != 2:
            raise ValidationError(f"grid descriptors: expected 2-d array, got shape {desc.shape}")
        if len(pts) != len(desc):
            raise ValidationError(
                f"grid: {len(pts)} points but {len(desc)} descriptors")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(desc))):
            raise ValidationError("grid: non-finite point or descriptor")
        pts.flags.writeable = False
        desc.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "stride", float(self.stride))

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def _check_rotation(R, what="rotation"):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValidationError(f"{what}: expected finite 3x3 matrix")
    if np.max(np.abs(R @ R.T - np.eye(3))) > ROTATION_TOL:
        raise ValidationError(f"{what}: not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
        raise ValidationError(f"{what}: determinant is not +1")


@dataclass(frozen=True, eq=False)
class Camera(_ArrayEq):
    """Scaled orthographic camera: ``m = scale * R[:2] @ p + translation``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, ndim=2, name="rotation"))
        object.__setattr__(self, "translation", _frozen(self.translation, ndim=1, name="translation"))
        object.__setattr__(self, "scale", float(self.scale))
        self.validate()

    def validate(self):
        _check_rotation(self.rotation, "camera rotation")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValidationError("camera scale must be positive and finite")
        if self.translation.shape != (2,) or not np.all(np.isfinite(self.translation)):
            raise ValidationError("camera translation must be a finite 2-vector")


@dataclass(frozen=True, eq=False)
class ObjectInstance(_ArrayEq):
    """One annotated view of an object.

    ``mirror_table`` is set on mirrored views only: entry ``k`` is the index in
    this view of grid point ``k`` of the original view.
    """

    id: str
    image_size: tuple
    mask: np.ndarray
    grid: FeatureGrid
    keypoints: KeypointSet
    camera: Optional[Camera] = None
    global_descriptor: Optional[np.ndarray] = None
    mirror_table: Optional[np.ndarray] = None

    def __post_init__(self):
        w, h = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (w, h))
        mask = np.array(self.mask, dtype=bool)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        if self.global_descriptor is not None:
            object.__setattr__(self, "global_descriptor",
                               _frozen(self.global_descriptor, ndim=1, name="global_descriptor"))
        if self.mirror_table is not None:
            object.__setattr__(self, "mirror_table",
                               _frozen(self.mirror_table, dtype=np.int64, ndim=1, name="mirror_table"))
        validate_instance(self)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def pooled_descriptor(self) -> np.ndarray:
        """Global descriptor; the mean grid descriptor when none is stored."""
        if self.global_descriptor is not None:
            return self.global_descriptor
        return self.grid.descriptors.mean(axis=0)

    def mask_bbox(self):
        """Mask bounding box ``(x0, y0, x1, y1)`` in continuous pixel coordinates."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        if rows.size == 0:
            raise ValidationError(f"instance {self.id}: empty mask")
        return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def validate_instance(inst: ObjectInstance):
    w, h = inst.image_size
    where = f"instance {inst.id}"
    if w <= 0 or h <= 0:
        raise ValidationError(f"{where}: image_size must be positive")
    if inst.mask.shape != (h, w):
        raise ValidationError(f"{where}: mask shape {inst.mask.shape} does not match image_size {(w, h)}")
    kp = inst.keypoints
    p = kp.positions[kp.visible]
    if np.any(p < 0) or np.any(p[:, 0] > w) or np.any(p[:, 1] > h):
        raise ValidationError(f"{where}: visible keypoint outside image bounds")
    pts = inst.grid.points
    if len(pts):
        if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
            raise ValidationError(f"{where}: grid point outside image bounds")
        # raster quantization: a point may sit one pixel off the sampled mask
        grown = ndimage.binary_dilation(inst.mask, structure=np.ones((3, 3), bool))
        c = np.clip(np.floor(pts[:, 0]).astype(int), 0, w - 1)
        r = np.clip(np.floor(pts[:, 1]).astype(int), 0, h - 1)
        if not np.all(grown[r, c]):
            raise ValidationError(f"{where}: grid point outside the mask")
    if inst.camera is not None:
        try:
            inst.camera.validate()
        except ValidationError as e:
            raise ValidationError(f"{where}: {e}") from None
    if inst.mirror_table is not None and len(inst.mirror_table) != len(pts):
        raise ValidationError(f"{where}: mirror_table length differs from grid size")


@dataclass(frozen=True, eq=False)
class Collection(_ArrayEq):
    class_label: str
    instances: tuple
    symmetry_swap: np.ndarray
    keypoint_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "symmetry_swap",
                           _frozen(self.symmetry_swap, dtype=np.int64, ndim=1, name="symmetry_swap"))
        names = tuple(self.keypoint_names)
        if not names and self.instances:
            names = self.instances[0].keypoints.names
        object.__setattr__(self, "keypoint_names", names)
        validate_collection(self)

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i) -> ObjectInstance:
        return self.instances[i]

    @property
    def n_keypoints(self) -> int:
        return len(self.symmetry_swap)

    @property
    def descriptor_dim(self) -> Optional[int]:
        return self.instances[0].grid.dim if self.instances else None

    def index_of(self, instance_id: str) -> int:
        for i, inst in enumerate(self.instances):
            if inst.id == instance_id:
                return i
        raise KeyError(instance_id)

    def with_instances(self, instances) -> "Collection":
        return replace(self, instances=tuple(instances))


def validate_collection(c: Collection):
    swap = c.symmetry_swap
    z = len(swap)
    if z and (np.any(swap < 0) or np.any(swap >= z) or not np.array_equal(swap[swap], np.arange(z))):
        raise ValidationError("symmetry_swap must be an involution over keypoint indices")
    if c.keypoint_names and len(c.keypoint_names) != z:
        raise ValidationError("keypoint_names length differs from symmetry_swap length")
    dim = None
    seen = set()
    for inst in c.instances:
        if inst.id in seen:
            raise ValidationError(f"instance {inst.id}: duplicate id")
        seen.add(inst.id)
        validate_instance(inst)
        if len(inst.keypoints) != z:
            raise ValidationError(f"instance {inst.id}: has {len(inst.keypoints)} keypoints, class has {z}")
        if c.keypoint_names and inst.keypoints.names != c.keypoint_names:
            raise ValidationError(f"instance {inst.id}: keypoint order differs from the class order")
        if len(inst.grid) and dim is None:
            dim = inst.grid.dim
        elif len(inst.grid) and inst.grid.dim != dim:
            raise ValidationError(
                f"instance {inst.id}: descriptor dimension {inst.grid.dim} differs from {dim}")
        if inst.global_descriptor is not None and dim is not None and len(inst.global_descriptor) != dim:
            raise ValidationError(f"instance {inst.id}: global descriptor dimension differs from {dim}")


# ---------------------------------------------------------------------------
# normalization


def resample_mask(mask: np.ndarray, f: float, shape) -> np.ndarray:
    """Nearest-neighbour resampling: new pixel centre ``(c + .5) / f`` reads the old pixel."""
    h, w = mask.shape
    rows = np.floor((np.arange(shape[0]) + 0.5) / f).astype(int)
    cols = np.floor((np.arange(shape[1]) + 0.5) / f).astype(int)
    out = np.zeros(shape, bool)
    rv, cv = rows < h, cols < w
    out[np.ix_(rv, cv)] = mask[np.ix_(rows[rv], cols[cv])]
    return out


def normalize_instance(instance: ObjectInstance, target_height: float = DEFAULT_HEIGHT) -> ObjectInstance:
    """Rescale so the mask bounding box is ``target_height`` pixels tall.

    Every 2D coordinate and the camera scale/translation are multiplied by the
    same factor. With an integer target the resampled mask spans exactly
    ``target_height`` rows.
    """
    x0, y0, x1, y1 = instance.mask_bbox()
    f = float(target_height) / (y1 - y0)
    if f == 1.0:
        return instance
    w, h = instance.image_size
    new_size = (int(math.ceil(w * f)), int(math.ceil(h * f)))
    mask = resample_mask(instance.mask, f, (new_size[1], new_size[0]))
    kp = instance.keypoints
    kpos = np.where(kp.visible[:, None], kp.positions * f, 0.0)
    cam = instance.camera
    if cam is not None:
        cam = Camera(cam.rotation, cam.scale * f, cam.translation * f)
    return replace(
        instance,
        image_size=new_size,
        mask=mask,
        grid=FeatureGrid(instance.grid.points * f, instance.grid.descriptors, instance.grid.stride),
        keypoints=KeypointSet(kp.names, kpos, kp.visible),
        camera=cam,
    )


def normalize_collection(c: Collection, target_height: float = DEFAULT_HEIGHT) -> Collection:
    return c.with_instances(normalize_instance(i, target_height) for i in c.instances)


# ---------------------------------------------------------------------------
# serialization


def rle_encode(mask: np.ndarray) -> list:
    """Row-major run lengths, alternating off/on, starting with an off run."""
    flat = np.asarray(mask, bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs, shape) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if np.any(runs < 0) or runs.sum() != shape[0] * shape[1]:
        raise ValidationError("mask.rle: run lengths do not cover the mask shape")
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs).reshape(shape)


def rasterize_polygon(poly, shape) -> np.ndarray:
    """Even-odd fill of pixel centres inside a polygon given as ``[[x, y], ...]``."""
    poly = np.asarray(poly, float)
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx.ravel() + 0.5, yy.ravel() + 0.5
    inside = np.zeros(px.size, bool)
    n = len(poly)
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        crosses = (ya > py) != (yb > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (px < xint)
    return inside.reshape(h, w)


def _camera_to_json(cam: Optional[Camera]):
    if cam is None:
        return None
    return {"rotation": cam.rotation.tolist(), "scale": cam.scale, "translation": cam.translation.tolist()}


def instance_to_json(inst: ObjectInstance) -> dict:
    kp = inst.keypoints
    return {
        "id": inst.id,
        "image_size": list(inst.image_size),
        "mask": {"shape": list(inst.mask.shape), "rle": rle_encode(inst.mask)},
        "grid": {
            "stride": inst.grid.stride,
            "points": inst.grid.points.tolist(),
            "descriptors": inst.grid.descriptors.tolist(),
        },
        "keypoints": [
            {"name": n, "position": kp.positions[i].tolist(), "visible": bool(kp.visible[i])}
            for i, n in enumerate(kp.names)
        ],
        "camera": _camera_to_json(inst.camera),
        "global_descriptor": None if inst.global_descriptor is None else inst.global_descriptor.tolist(),
        "mirror_table": None if inst.mirror_table is None else inst.mirror_table.tolist(),
    }


def _require(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ValidationError(f"{where}: missing field '{key}'")
    return d[key]


def instance_from_json(d: dict, pos: int) -> ObjectInstance:
    where = f"instances[{pos}]"
    iid = str(_require(d, "id", where))
    where = f"instance {iid}"
    size = _require(d, "image_size", where)
    if not (isinstance(size, list) and len(size) == 2):
        raise ValidationError(f"{where}: field 'image_size' must be [width, height]")
    m = _require(d, "mask", where)
    if "rle" in m:
        shape = tuple(_require(m, "shape", f"{where}.mask"))
        mask = rle_decode(m["rle"], shape)
    elif "polygon" in m:
        mask = rasterize_polygon(m["polygon"], (size[1], size[0]))
    else:
        raise ValidationError(f"{where}: field 'mask' needs 'rle' or 'polygon'")
    g = _require(d, "grid", where)
    pts = np.array(_require(g, "points", f"{where}.grid"), float).reshape(-1, 2)
    desc = np.array(_require(g, "descriptors", f"{where}.grid"), float)
    if desc.size == 0:
        desc = desc.reshape(len(pts), -1) if len(pts) == 0 else desc
    kps = _require(d, "keypoints", where)
    try:
        keypoints = KeypointSet(
            [k["name"] for k in kps],
            np.array([k["position"] for k in kps], float).reshape(-1, 2),
            [bool(k["visible"]) for k in kps],
        )
        cam = d.get("camera")
        camera = None if cam is None else Camera(cam["rotation"], cam["scale"], cam["translation"])
        grid = FeatureGrid(pts, desc, g.get("stride", DEFAULT_STRIDE))
    except (KeyError, TypeError) as e:
        raise ValidationError(f"{where}: malformed field {e}") from None
    except ValidationError as e:
        raise ValidationError(f"{where}: {e}") from None
    return ObjectInstance(iid, tuple(size), mask, grid, keypoints, camera,
                          d.get("global_descriptor"), d.get("mirror_table"))


def collection_to_json(c: Collection) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "class_label": c.class_label,
        "keypoint_names": list(c.keypoint_names),
        "symmetry_swap": c.symmetry_swap.tolist(),
        "instances": [instance_to_json(i) for i in c.instances],
    }


def collection_from_json(doc: dict) -> Collection:
    if _require(doc, "format", "document") != FORMAT_NAME:
        raise ValidationError("document: field 'format' is not " + FORMAT_NAME)
    if _require(doc, "version", "document") != FORMAT_VERSION:
        raise ValidationError(f"document: unsupported version {doc['version']}")
    insts = [instance_from_json(d, i) for i, d in enumerate(_require(doc, "instances", "document"))]
    return Collection(
        str(_require(doc, "class_label", "document")),
        insts,
        _require(doc, "symmetry_swap", "document"),
        tuple(doc.get("keypoint_names", ())),
    )


def save_collection(collection: Collection, path) -> None:
    """Write a collection as UTF-8 JSON.

    Floats are written with ``repr`` (shortest round-tripping form), so every
    numeric field loads back bit-exact.
    """
    validate_collection(collection)
    text = json.dumps(collection_to_json(collection), allow_nan=False, separators=(",", ":"))
    Path(path).write_text(text, encoding="utf-8")


def load_collection(path, target_height: Optional[float] = DEFAULT_HEIGHT) -> Collection:
    """Load and validate a collection; normalize to ``target_height`` unless None."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"document: not valid JSON ({e})") from None
    c = collection_from_json(doc)
    if target_height is not None:
        c = normalize_collection(c, target_height)
    return c
