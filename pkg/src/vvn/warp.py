"""Thin plate spline and axis-aligned affine interpolants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .core import NumericalError, ValidationError


class DegenerateControlsError(NumericalError):
    """Control points make the spline system singular (duplicates or collinear)."""


def tps_kernel(r):
    """``U(r) = r^2 log r`` with ``U(0) = 0``."""
    r = np.asarray(r, float)
    out = np.zeros_like(r)
    nz = r > 0
    out[nz] = r[nz] ** 2 * np.log(r[nz])
    return out


def _pts(a, what):
    a = np.asarray(a, float)
    if a.ndim == 1:
        a = a.reshape(1, 2)
    if a.ndim != 2 or a.shape[1] != 2:
        raise ValidationError(f"{what}: expected (n, 2) points")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what}: non-finite input")
    return a


@dataclass(frozen=True, eq=False)
class ThinPlateSpline:
    control_points: np.ndarray
    affine_part: np.ndarray  # (2, 3): columns act on [x, y, 1]
    kernel_weights: np.ndarray  # (n, 2)
    regularization: float = 0.0

    def __call__(self, pts):
        return eval_tps(self, pts)

    def bending_energy(self) -> float:
        K = tps_kernel(cdist(self.control_points, self.control_points))
        W = self.kernel_weights
        return float(abs(np.trace(W.T @ K @ W)))


@dataclass(frozen=True, eq=False)
class AffineMap2D:
    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.matrix)) and np.all(np.isfinite(self.offset))):
            raise ValidationError("affine map: non-finite entries")

    def __call__(self, pts):
        p = _pts(pts, "affine map input")
        return p @ np.asarray(self.matrix).T + self.offset

    def inverse(self) -> "AffineMap2D":
        Minv = np.linalg.inv(self.matrix)
        return AffineMap2D(Minv, -Minv @ self.offset)


def fit_tps(src, dst, lam: float = 0.0) -> ThinPlateSpline:
    """Closed-form thin plate spline mapping ``src`` onto ``dst``.

    Solves ``[[K + lam I, P], [P^T, 0]] [W; A] = [dst; 0]`` with ``P = [1, x, y]``.
    Raises DegenerateControlsError when that system is singular.
    """
    src = _pts(src, "tps src")
    dst = _pts(dst, "tps dst")
    if len(src) != len(dst) or len(src) < 3:
        raise ValidationError("fit_tps: need equal-length point sets with >= 3 points")
    if lam < 0:
        raise ValidationError("fit_tps: lambda must be non-negative")
    n = len(src)
    K = tps_kernel(cdist(src, src))
    P = np.hstack([np.ones((n, 1)), src])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K + lam * np.eye(n)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = dst
    if np.linalg.matrix_rank(P, tol=1e-9 * max(1.0, np.abs(src).max())) < 3:
        raise DegenerateControlsError("fit_tps: control points are collinear")
    try:
        sol = np.linalg.solve(L, rhs)
    except np.linalg.LinAlgError:
        raise DegenerateControlsError("fit_tps: singular system (duplicate control points?)") from None
    if np.linalg.cond(L) > 1e13 or not np.all(np.isfinite(sol)):
        raise DegenerateControlsError("fit_tps: ill-conditioned system (duplicate control points?)")
    W = sol[:n]
    a = sol[n:]  # rows: constant, x, y
    affine = np.column_stack([a[1], a[2], a[0]])
    return ThinPlateSpline(src.copy(), affine, W, float(lam))


def eval_tps(tps: ThinPlateSpline, pts) -> np.ndarray:
    """``g(x) = A [x; 1] + sum_k w_k U(|x - c_k|)``."""
    p = _pts(pts, "tps input")
    out = p @ tps.affine_part[:, :2].T + tps.affine_part[:, 2]
    if np.any(tps.kernel_weights):
        out = out + tps_kernel(cdist(p, tps.control_points)) @ tps.kernel_weights
    return out


def fit_affine_box(src_box, dst_box) -> AffineMap2D:
    """Anisotropic scaling plus offset mapping box corners onto box corners.

    Boxes are given either as ``(x0, y0, x1, y1)`` or as four corner points.
    """
    s = _box(src_box)
    d = _box(dst_box)
    sw, sh = s[2] - s[0], s[3] - s[1]
    if sw <= 0 or sh <= 0 or d[2] - d[0] <= 0 or d[3] - d[1] <= 0:
        raise ValidationError("fit_affine_box: zero-area box")
    sx = (d[2] - d[0]) / sw
    sy = (d[3] - d[1]) / sh
    return AffineMap2D(np.diag([sx, sy]), np.array([d[0] - sx * s[0], d[1] - sy * s[1]]))


def _box(b):
    b = np.asarray(b, float)
    if not np.all(np.isfinite(b)):
        raise ValidationError("box: non-finite input")
    if b.shape == (4,):
        return b
    if b.shape == (4, 2):
        return np.array([b[:, 0].min(), b[:, 1].min(), b[:, 0].max(), b[:, 1].max()])
    raise ValidationError("box: expected (x0, y0, x1, y1) or 4 corners")


def warp_cost(x_src, x_dst, interp) -> np.ndarray:
    """``|| x_dst - interp(x_src) ||`` in pixels; broadcasts over rows."""
    x_src = _pts(x_src, "warp_cost src")
    x_dst = _pts(x_dst, "warp_cost dst")
    d = np.linalg.norm(x_dst - interp(x_src), axis=1)
    return float(d[0]) if d.size == 1 else d


def fit_keypoint_warp(src, dst, lam: float = 0.0):
    """Interpolant from corresponding keypoints, with fallbacks.

    Tries an exact spline, then a ridge of ``1e-8 * mean squared control
    distance``; with fewer than 3 usable controls, or if both fail, maps the
    keypoint bounding boxes; with degenerate boxes, a pure translation.
    """
    src = _pts(src, "keypoint warp src").reshape(-1, 2)
    dst = _pts(dst, "keypoint warp dst").reshape(-1, 2)
    if len(src) >= 3:
        try:
            return fit_tps(src, dst, lam)
        except DegenerateControlsError:
            pass
        ridge = 1e-8 * float(np.mean(cdist(src, src) ** 2))
        try:
            return fit_tps(src, dst, lam + ridge)
        except DegenerateControlsError:
            pass
    if len(src) >= 2:
        try:
            return fit_affine_box(_box_of(src), _box_of(dst))
        except ValidationError:
            pass
    if len(src) == 0:
        return AffineMap2D(np.eye(2), np.zeros(2))
    return AffineMap2D(np.eye(2), dst.mean(0) - src.mean(0))


def _box_of(p):
    return np.array([p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()])
