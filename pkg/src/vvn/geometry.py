"""Rotation metric, scaled orthographic projection, mirroring and Procrustes."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    Camera, Collection, FeatureGrid, KeypointSet, NumericalError, ObjectInstance,
    ValidationError, _check_rotation,
)

REFLECT_X = np.diag([-1.0, 1.0, 1.0])


def _finite(a, what):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what}: non-finite input")
    return a


def skew(w):
    w = np.asarray(w, float)
    z = np.zeros(w.shape[:-1])
    return np.stack([
        np.stack([z, -w[..., 2], w[..., 1]], -1),
        np.stack([w[..., 2], z, -w[..., 0]], -1),
        np.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def rotation_from_axis_angle(axis, angle):
    """Rodrigues formula. Broadcasts over leading dimensions of ``axis``/``angle``."""
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, float)[..., None, None]
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def random_rotations(n, rng) -> np.ndarray:
    """Haar-uniform rotations from normalized quaternions."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((n, 3, 3))
    R[:, 0] = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], 1)
    R[:, 1] = np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], 1)
    R[:, 2] = np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], 1)
    return R


def so3_log(R) -> np.ndarray:
    """Matrix logarithm on SO(3), batched over leading dimensions.

    Angle from ``atan2(|sin|, cos)``; axis from the skew part, or from the
    dominant eigenvector of the symmetric part when the angle is near pi.
    """
    R = np.asarray(R, float)
    c = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    v = 0.5 * np.stack([R[..., 2, 1] - R[..., 1, 2],
                        R[..., 0, 2] - R[..., 2, 0],
                        R[..., 1, 0] - R[..., 0, 1]], -1)
    s = np.linalg.norm(v, axis=-1)
    theta = np.arctan2(s, c)
    factor = np.ones_like(theta)
    nz = s > 1e-300
    factor[nz] = theta[nz] / s[nz]
    w = v * factor[..., None]
    near_pi = (c < 0) & (s < 1e-4)
    if np.any(near_pi):
        Rp = R[near_pi]
        sym = 0.5 * (Rp + np.swapaxes(Rp, -1, -2))
        cp = c[near_pi][:, None, None]
        B = (sym - cp * np.eye(3)) / (1.0 - cp)
        _, vecs = np.linalg.eigh(B)
        axis = vecs[..., :, -1]
        sign = np.sign(np.einsum("ni,ni->n", axis, v[near_pi]))
        sign[sign == 0] = 1.0
        w[near_pi] = axis * (sign * theta[near_pi])[:, None]
    return skew(w)


def rotation_angle(Ra, Rb) -> np.ndarray:
    """Relative rotation angle in radians, in [0, pi]. Batched."""
    return rotation_distance(Ra, Rb) / np.sqrt(2.0)


def rotation_distance(Ra, Rb):
    """Riemannian distance ``||log(Ra Rb^T)||_F`` (= sqrt(2) * angle). Batched."""
    Ra = _finite(Ra, "rotation")
    Rb = _finite(Rb, "rotation")
    if Ra.ndim == 2 and Rb.ndim == 2:
        _check_rotation(Ra)
        _check_rotation(Rb)
    L = so3_log(Ra @ np.swapaxes(Rb, -1, -2))
    d = np.sqrt(np.sum(L * L, axis=(-2, -1)))
    return float(d) if d.ndim == 0 else d


def pairwise_rotation_distance(Ra, Rb=None) -> np.ndarray:
    """``D[i, j] = rotation_distance(Ra[i], Rb[j])``."""
    Ra = np.asarray(Ra, float)
    Rb = Ra if Rb is None else np.asarray(Rb, float)
    return rotation_distance(Ra[:, None], Rb[None, :])


def viewpoint_difference_deg(Ra, Rb):
    return np.degrees(rotation_angle(Ra, Rb))


def project(camera: Camera, points) -> np.ndarray:
    """Scaled orthographic projection of an ``(n, 3)`` array to ``(n, 2)`` pixels."""
    p = _finite(points, "points").reshape(-1, 3)
    return camera.scale * (p @ camera.rotation[:2].T) + camera.translation


def camera_matrix(camera: Camera) -> np.ndarray:
    """2x4 affine matrix ``[s R[:2] | t]``."""
    return np.hstack([camera.scale * camera.rotation[:2], camera.translation[:, None]])


# ---------------------------------------------------------------------------
# mirroring


def mirror_camera(camera: Camera, width: float) -> Camera:
    """Camera of the flipped image viewing the x-reflected object."""
    R = REFLECT_X @ camera.rotation @ REFLECT_X
    t = np.array([width - camera.translation[0], camera.translation[1]])
    return Camera(R, camera.scale, t)


def mirror_id(instance_id: str) -> str:
    suffix = "#mirror"
    return instance_id[: -len(suffix)] if instance_id.endswith(suffix) else instance_id + suffix


def mirror_instance(instance: ObjectInstance, swap) -> ObjectInstance:
    """Flip a view left-right.

    Coordinates map ``x -> width - x``, keypoint identities are permuted by
    ``swap`` and the grid keeps its order, so the recorded correspondence table
    is the identity. Mirroring twice returns the original instance.
    """
    if swap is None:
        raise ValidationError("mirror_instance: missing symmetry swap table")
    swap = np.asarray(swap, dtype=np.int64)
    kp = instance.keypoints
    if len(swap) != len(kp):
        raise ValidationError("mirror_instance: swap table length differs from keypoint count")
    w = instance.width
    pts = instance.grid.points.copy()
    pts[:, 0] = w - pts[:, 0]
    kpos = kp.positions.copy()
    kpos[:, 0] = np.where(kp.visible, w - kpos[:, 0], 0.0)
    # keypoint named z in the flipped image is the flipped keypoint swap[z]
    keypoints = KeypointSet(kp.names, kpos[swap], kp.visible[swap])
    cam = None if instance.camera is None else mirror_camera(instance.camera, w)
    table = None if instance.mirror_table is not None else np.arange(len(pts))
    return replace(
        instance,
        id=mirror_id(instance.id),
        mask=instance.mask[:, ::-1],
        grid=FeatureGrid(pts, instance.grid.descriptors, instance.grid.stride),
        keypoints=keypoints,
        camera=cam,
        mirror_table=table,
    )


def augment_with_mirrors(collection: Collection) -> Collection:
    """Originals followed by their mirrored versions, in the same order."""
    mirrored = [mirror_instance(i, collection.symmetry_swap) for i in collection.instances]
    return collection.with_instances(list(collection.instances) + mirrored)


# ---------------------------------------------------------------------------
# similarity alignment


@dataclass(frozen=True)
class SimilarityTransform3D:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        _check_rotation(self.rotation)
        if not self.scale > 0:
            raise ValidationError("similarity scale must be positive")

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, float) @ self.rotation.T + self.translation


def procrustes_align(A, B):
    """Similarity ``s R a + t`` minimizing squared distance to ``B`` (Umeyama).

    Returns ``(transform, rmse)`` where rmse is the per-point residual RMS.
    """
    A = _finite(A, "procrustes A").reshape(-1, 3)
    B = _finite(B, "procrustes B").reshape(-1, 3)
    if len(A) != len(B) or len(A) < 3:
        raise ValidationError("procrustes_align: need equal-length point sets with >= 3 points")
    ma, mb = A.mean(0), B.mean(0)
    Ac, Bc = A - ma, B - mb
    var_a = np.sum(Ac * Ac) / len(A)
    sv = np.linalg.svd(Ac, compute_uv=False)
    if var_a == 0 or sv[1] <= 1e-12 * sv[0]:
        raise NumericalError("procrustes_align: degenerate configuration (rank < 2)")
    cov = Bc.T @ Ac / len(A)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_a)
    t = mb - s * R @ ma
    tf = SimilarityTransform3D(s, R, t)
    resid = tf.apply(A) - B
    rmse = float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))
    return tf, rmse


def depth_flip(points) -> np.ndarray:
    """Reflect through the z = 0 plane (the orthographic relief ambiguity)."""
    p = np.array(points, float)
    p[:, 2] = -p[:, 2]
    return p


def procrustes_rmse_min_depth(recon, truth):
    """Best of the two depth signs: ``(rmse, sign, transform)``."""
    best = None
    for sign in (1.0, -1.0):
        pts = recon if sign > 0 else depth_flip(recon)
        tf, rmse = procrustes_align(pts, truth)
        if best is None or rmse < best[0]:
            best = (rmse, sign, tf)
    return best


# ---------------------------------------------------------------------------
# camera bootstrapping


def estimate_cameras(collection: Collection, keypoint_subset=None, max_iters=500, tol=1e-9):
    """Scaled orthographic cameras for every instance from its keypoints.

    Factorizes the keypoint observation matrix with visibility as the missing
    data mask. The first instance's rotation is the identity. Pass
    ``keypoint_subset`` to use only keypoints on a rigid part.
    """
    from .factorization import ObservationMatrix, factorize

    n = len(collection)
    if n < 3:
        raise ValidationError("estimate_cameras: need at least 3 instances")
    idx = np.arange(collection.n_keypoints) if keypoint_subset is None else np.asarray(keypoint_subset)
    F, K = n, len(idx)
    values = np.zeros((2 * F, K))
    known = np.zeros((2 * F, K), bool)
    for f, inst in enumerate(collection.instances):
        vis = inst.keypoints.visible[idx]
        if vis.sum() < 4:
            raise ValidationError(f"estimate_cameras: instance {inst.id} has fewer than 4 visible keypoints")
        values[2 * f: 2 * f + 2] = inst.keypoints.positions[idx].T
        known[2 * f: 2 * f + 2] = vis
    res = factorize(ObservationMatrix(values, known), max_iters=max_iters, tol=tol)
    return [Camera(m.rotation, m.scale, m.translation) for m in res.motions]
