"""Rigid scaled orthographic factorization with missing data and frame weights.

The objective is

    sum_f w_f * sum_{k known in f} || o_fk - (s_f P_f x_k + t_f) ||^2

where ``P_f`` holds the first two rows of a rotation. The solver runs in two
stages:

1. affine factorization by alternating least squares (frame step: affine
   camera ``[A_f | t_f]``; column step: 3D point), initialized incrementally:
   a truncated SVD of the densest fully observed block of frames and points,
   grown by alternating affine resection of frames and triangulation of
   points. Frames or points the growth cannot reach get regularized
   estimates; without a usable seed block the start is a truncated SVD of the
   column-mean imputed matrix. This is followed by
   a metric upgrade that makes every ``A_f`` a scaled pair of orthonormal rows;
2. monotone alternation on the scaled orthographic model: exact weighted
   least squares for the shape, and majorize-minimize steps for each frame's
   ``(s_f, P_f, t_f)``, each step an exact projection onto scaled Stiefel
   matrices. Neither step can increase the objective.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .core import NumericalError, ValidationError

log = logging.getLogger(__name__)


class DegenerateMotionError(NumericalError):
    """All views share one viewing direction, so depth is unobservable."""


@dataclass(frozen=True, eq=False)
class ObservationMatrix:
    """``2F x K`` stacked image coordinates; rows ``2f`` and ``2f + 1`` are frame f's x and y."""

    values: np.ndarray
    known: np.ndarray
    row_weights: np.ndarray = None

    def __post_init__(self):
        v = np.array(self.values, float)
        k = np.array(self.known, bool)
        if v.ndim != 2 or v.shape[0] % 2 or v.shape != k.shape:
            raise ValidationError("observation matrix: values/known must share a (2F, K) shape")
        if not np.array_equal(k[0::2], k[1::2]):
            raise ValidationError("observation matrix: x and y rows of a frame must share a mask")
        if not np.all(np.isfinite(v[k])):
            raise ValidationError("observation matrix: non-finite known entry")
        v = np.where(k, v, 0.0)
        w = np.ones(v.shape[0] // 2) if self.row_weights is None else np.array(self.row_weights, float)
        if w.shape != (v.shape[0] // 2,) or not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValidationError("observation matrix: row_weights must be F positive reals")
        for a in (v, k, w):
            a.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "known", k)
        object.__setattr__(self, "row_weights", w)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0] // 2

    @property
    def n_points(self) -> int:
        return self.values.shape[1]

    @property
    def frame_known(self) -> np.ndarray:
        return self.known[0::2]

    def frames(self) -> np.ndarray:
        """Observations as an ``(F, K, 2)`` array."""
        return np.stack([self.values[0::2], self.values[1::2]], axis=-1)

    def with_weights(self, w) -> "ObservationMatrix":
        return ObservationMatrix(self.values, self.known, w)

    def sparse_frames(self, min_points=4) -> np.ndarray:
        return np.flatnonzero(self.frame_known.sum(1) < min_points)


@dataclass(frozen=True)
class Motion:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray


@dataclass(frozen=True, eq=False)
class FactorizationResult:
    shape: np.ndarray  # (3, K)
    motions: list
    completed: np.ndarray  # (2F, K)
    residual: float
    iterations: int
    converged: bool = True
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# helpers


def _stiefel_project(B):
    """Nearest ``s * P`` (P with orthonormal rows) to each 2x3 block of ``B``."""
    U, S, Vt = np.linalg.svd(B, full_matrices=False)
    P = U @ Vt
    return S.mean(axis=-1), P


def _full_rotation(P):
    return np.concatenate([P, np.cross(P[..., 0, :], P[..., 1, :])[..., None, :]], axis=-2)


def _predict(B, t, X):
    """``(F, K, 2)`` model projections for camera blocks ``B`` (F, 2, 3)."""
    return np.swapaxes(B @ X, 1, 2) + t[:, None, :]


def _sq_errors(O, M, B, t, X):
    d = O - _predict(B, t, X)
    return np.where(M, np.sum(d * d, axis=-1), 0.0)


def _objective(O, M, w, B, t, X):
    return float(np.sum(w[:, None] * _sq_errors(O, M, B, t, X)))


def _solve_shape(O, M, w, B, t, ridge=1e-13):
    wm = w[:, None] * M
    BtB = np.swapaxes(B, 1, 2) @ B
    H = (wm.T @ BtB.reshape(len(B), 9)).reshape(-1, 3, 3)
    Y = wm[..., None] * (O - t[:, None, :])
    rhs = np.tensordot(Y, B, axes=([0, 2], [0, 1]))
    tr = np.trace(H, axis1=1, axis2=2)
    H = H + (ridge * tr)[:, None, None] * np.eye(3)
    return np.linalg.solve(H, rhs[..., None])[..., 0].T


def _frame_moments(O, M, X):
    n = M.sum(1).astype(float)
    n_safe = np.maximum(n, 1.0)
    Mf = M.astype(float)
    MO = Mf[..., None] * O
    mo = MO.sum(1) / n_safe[:, None]
    mx = (Mf @ X.T) / n_safe[:, None]
    # centred second moments, expanded to avoid (F, K, 3) temporaries
    C = np.swapaxes(MO, 1, 2) @ X.T - n[:, None, None] * (mo[:, :, None] * mx[:, None, :])
    G = (Mf[:, None, :] * X[None]) @ X.T - n[:, None, None] * (mx[:, :, None] * mx[:, None, :])
    return mo, mx, C, G


def _update_motions(O, M, X, B, inner=8):
    """Majorize-minimize steps on each frame's camera block; never increases the objective."""
    mo, mx, C, G = _frame_moments(O, M, X)
    L = np.linalg.eigvalsh(G)[:, -1]
    L = np.where(L > 0, L, 1.0)
    for _ in range(inner):
        Y = B - (B @ G - C) / L[:, None, None]
        s, P = _stiefel_project(Y)
        B = s[:, None, None] * P
    t = mo - np.einsum("fij,fj->fi", B, mx)
    return B, t


def _affine_init(O, M, w):
    n = np.maximum(M.sum(1), 1)[:, None]
    cen = np.einsum("fk,fki->fi", M, O) / n
    Oc = np.where(M[..., None], O - cen[:, None, :], 0.0)
    counts = np.maximum(M.sum(0), 1)
    colmean = Oc.sum(0) / counts[:, None]
    filled = np.where(M[..., None], Oc, colmean[None])
    W = np.concatenate([filled[..., 0], filled[..., 1]], axis=0)  # rows: all x then all y
    F = O.shape[0]
    sw = np.sqrt(np.concatenate([w, w]))
    U, S, Vt = np.linalg.svd(sw[:, None] * W, full_matrices=False)
    r = min(3, len(S))
    root = np.sqrt(S[:r])
    Arows = (U[:, :r] * root) / sw[:, None]
    X = root[:, None] * Vt[:r]
    if r < 3:
        Arows = np.pad(Arows, ((0, 0), (0, 3 - r)))
        X = np.pad(X, ((0, 3 - r), (0, 0)))
    A = np.stack([Arows[:F], Arows[F:]], axis=1)
    return A, cen, X


def _seed_blocks(M, min_points=6, max_frames=30, n_starts=10):
    """Greedy dense blocks: frames added while they share >= min_points with the block."""
    F, K = M.shape
    counts = M.sum(1)
    cands = []
    for f0 in np.argsort(-counts, kind="stable")[:n_starts]:
        S, C = [int(f0)], M[f0].copy()
        while len(S) < max_frames:
            share = (M & C).sum(1)
            share[S] = -1
            g = int(np.argmax(share))
            if share[g] < min_points:
                break
            S.append(g)
            C &= M[g]
        if len(S) >= 3 and C.sum() >= 4:
            cands.append((S, C))
    return cands


def _solve_camera(Xk, Ok):
    """Affine camera ``[A | t]`` from reconstructed points (n, 3) and their images (n, 2)."""
    D = np.hstack([Xk, np.ones((len(Xk), 1))])
    sol, _, rank, sv = np.linalg.lstsq(D, Ok, rcond=None)
    if rank < 4 or sv[-1] < 1e-9 * sv[0]:
        return None
    return sol[:3].T, sol[3]


def _triangulate(A, t, Ok, w):
    """Point from affine cameras (n, 2, 3), offsets (n, 2) and observations (n, 2)."""
    sw = np.sqrt(w)[:, None, None]
    D = (sw * A).reshape(-1, 3)
    y = (sw[..., 0] * (Ok - t)).reshape(-1)
    sol, _, rank, sv = np.linalg.lstsq(D, y, rcond=None)
    if rank < 3 or sv[-1] < 1e-6 * sv[0]:
        return None
    return sol


def _incremental_init(O, M, w, min_points=6):
    """Affine cameras and points grown from a dense seed block; None without a usable seed."""
    F, K = M.shape
    # seed: the candidate block whose affine shape is best conditioned
    best = None
    for S, C in _seed_blocks(M, min_points):
        cols = np.flatnonzero(C)
        sub = O[np.ix_(S, cols)]
        cen = sub.mean(1)
        W = np.concatenate([(sub - cen[:, None])[..., 0], (sub - cen[:, None])[..., 1]], axis=0)
        U, sv, Vt = np.linalg.svd(W, full_matrices=False)
        if len(sv) < 4:
            continue
        # third singular value against the noise level (fourth)
        score = (sv[2] - sv[3]) / sv[0]
        if best is None or score > best[0]:
            best = (score, S, cols, cen, U, sv, Vt)
    if best is None or best[0] < 1e-9:
        return None
    _, S, cols, cen, U, sv, Vt = best
    root = np.sqrt(sv[:3])
    Ar = U[:, :3] * root
    A = np.zeros((F, 2, 3))
    t = np.zeros((F, 2))
    X = np.zeros((3, K))
    have_f = np.zeros(F, bool)
    have_k = np.zeros(K, bool)
    n = len(S)
    A[S, 0], A[S, 1] = Ar[:n], Ar[n:]
    t[S] = cen
    have_f[S] = True
    X[:, cols] = root[:, None] * Vt[:3]
    have_k[cols] = True
    while True:
        grew = False
        # triangulate points seen by >= 2 reconstructed frames
        for k in np.flatnonzero(~have_k & ((M & have_f[:, None]).sum(0) >= 2)):
            f = np.flatnonzero(M[:, k] & have_f)
            x = _triangulate(A[f], t[f], O[f, k], w[f])
            if x is not None:
                X[:, k] = x
                have_k[k] = True
                grew = True
        # resect frames seeing >= 4 reconstructed points
        for f in np.flatnonzero(~have_f & ((M & have_k[None, :]).sum(1) >= 4)):
            k = np.flatnonzero(M[f] & have_k)
            cam = _solve_camera(X[:, k].T, O[f, k])
            if cam is not None:
                A[f], t[f] = cam
                have_f[f] = True
                grew = True
        if grew:
            continue
        if have_f.all() and have_k.all():
            break
        # stalled: under-constrained frames get the camera closest to the mean
        # reconstructed camera that fits their points; points the same way
        mean_cam = np.concatenate([A[have_f].mean(0), t[have_f].mean(0)[:, None]], axis=1)
        for f in np.flatnonzero(~have_f):
            k = np.flatnonzero(M[f] & have_k)
            D = np.hstack([X[:, k].T, np.ones((len(k), 1))])
            lam = 1e-6 * max(1.0, float(np.sum(D * D)))
            G = D.T @ D + lam * np.eye(4)
            sol = np.linalg.solve(G, D.T @ O[f, k] + lam * mean_cam.T)
            A[f], t[f] = sol[:3].T, sol[3]
            have_f[f] = True
        for k in np.flatnonzero(~have_k):
            f = np.flatnonzero(M[:, k] & have_f)
            sw = np.sqrt(w[f])[:, None, None]
            D = (sw * A[f]).reshape(-1, 3)
            y = (sw[..., 0] * (O[f, k] - t[f])).reshape(-1)
            X[:, k] = np.linalg.lstsq(D, y, rcond=None)[0]
            have_k[k] = True
    return A, t, X


def _floor(O, M, w):
    # objective values below this are round-off for data of this magnitude
    return 1e-22 * float(np.sum(w[:, None] * np.where(M, np.sum(O * O, -1), 0.0))) + 1e-300


def _affine_als(O, M, w, A, t, X, max_iters, tol):
    floor = _floor(O, M, w)
    prev = _objective(O, M, w, A, t, X)
    it = 0
    if prev <= floor:
        return A, t, X, it
    for it in range(1, max_iters + 1):
        # column step
        X = _solve_shape(O, M, w, A, t)
        # keep the gauge well conditioned: centred, orthonormal shape rows
        c = X.mean(1, keepdims=True)
        t = t + np.einsum("fij,j->fi", A, c[:, 0])
        X = X - c
        Q, R = np.linalg.qr(X.T)
        if np.all(np.abs(np.diag(R)) > 1e-300):
            X = Q.T
            A = A @ R.T
        # frame step: affine camera per frame
        Xh = np.vstack([X, np.ones((1, X.shape[1]))])
        Mf = M.astype(float)
        G = (Mf[:, None, :] * Xh[None]) @ Xh.T
        rhs = np.swapaxes(Mf[..., None] * O, 1, 2) @ Xh.T
        G = G + 1e-13 * np.trace(G, axis1=1, axis2=2)[:, None, None] * np.eye(4)
        At = np.linalg.solve(G, np.swapaxes(rhs, 1, 2))
        At = np.swapaxes(At, 1, 2)
        A, t = At[:, :, :3], At[:, :, 3]
        cur = _objective(O, M, w, A, t, X)
        if cur <= floor or abs(prev - cur) <= tol * max(prev, 1e-300):
            break
        prev = cur
    return A, t, X, it


def _linear_metric(A, w):
    """Null vector of the linear equal-norm / orthogonality constraints on ``L = Q Q^T``."""
    a, b = A[:, 0], A[:, 1]

    def g(u, v):
        return np.stack([
            u[:, 0] * v[:, 0],
            u[:, 0] * v[:, 1] + u[:, 1] * v[:, 0],
            u[:, 0] * v[:, 2] + u[:, 2] * v[:, 0],
            u[:, 1] * v[:, 1],
            u[:, 1] * v[:, 2] + u[:, 2] * v[:, 1],
            u[:, 2] * v[:, 2],
        ], axis=1)

    sw = np.sqrt(w)[:, None]
    Cm = np.vstack([sw * (g(a, a) - g(b, b)), sw * g(a, b)])
    d = (w[:, None] * (g(a, a) + g(b, b))).sum(0)
    lv = np.linalg.svd(Cm)[2][-1]
    scale = d @ lv
    if scale == 0:
        return None
    lv = lv / scale
    L = np.array([[lv[0], lv[1], lv[2]], [lv[1], lv[3], lv[4]], [lv[2], lv[4], lv[5]]])
    evals, evecs = np.linalg.eigh(L)
    if evals[-1] <= 0:
        return None
    return evecs * np.sqrt(np.maximum(evals, evals[-1] * 1e-4))


def _metric_upgrade(A, w, n_restarts=4):
    """3x3 ``Q`` making every ``A_f Q`` closest to a scaled pair of orthonormal rows.

    The linear solution is noise sensitive and can be indefinite, so it only
    seeds a nonlinear fit of ``Q`` to the scale-free per-frame residuals
    ``(|u|^2 - |v|^2) / (|u|^2 + |v|^2)`` and ``2 u.v / (|u|^2 + |v|^2)`` with
    ``u, v`` the rows of ``A_f Q``.
    """
    norm = np.sqrt(np.sum(A * A, axis=(1, 2)))
    ok = norm > 0
    An = A[ok] / norm[ok, None, None]
    sw = np.sqrt(w[ok] / np.mean(w[ok]))
    tril = np.tril_indices(3)

    def unpack(q):
        Q = np.zeros((3, 3))
        Q[tril] = q
        return Q

    def resid(q):
        AQ = An @ unpack(q)
        u, v = AQ[:, 0], AQ[:, 1]
        uu, vv, uv = np.sum(u * u, 1), np.sum(v * v, 1), np.sum(u * v, 1)
        den = uu + vv + 1e-300
        return np.concatenate([sw * (uu - vv) / den, sw * 2 * uv / den])

    starts = []
    Q0 = _linear_metric(An, w[ok])
    if Q0 is not None:
        starts.append(np.linalg.cholesky(Q0 @ Q0.T + 1e-12 * np.eye(3) * np.trace(Q0 @ Q0.T)))
    rng = np.random.default_rng(0)
    starts.append(np.eye(3))
    starts += [np.linalg.cholesky(X @ X.T + 0.1 * np.eye(3))
               for X in rng.standard_normal((n_restarts, 3, 3))]
    best = None
    for Qs in starts:
        sol = least_squares(resid, Qs[tril], method="lm", xtol=1e-12, ftol=1e-12)
        if best is None or sol.cost < best.cost - 1e-12:
            best = sol
    Q = unpack(best.x)
    if not np.all(np.isfinite(Q)) or abs(np.linalg.det(Q)) < 1e-12 * np.linalg.norm(Q) ** 3:
        raise NumericalError("metric upgrade failed: degenerate correction")
    # restore the overall scale of the affine cameras
    s = np.linalg.svd(A[ok] @ Q, compute_uv=False).mean()
    return Q * (np.sqrt(np.mean(norm[ok] ** 2) / 2) / s) if s > 0 else Q


def _gauge_fix(B, t, X):
    s, P = _stiefel_project(B)
    R0 = _full_rotation(P[0])
    P = P @ R0.T
    X = R0 @ X
    c = X.mean(1)
    t = t + np.einsum("f,fij,j->fi", s, P, c)
    X = X - c[:, None]
    norm = np.mean(np.linalg.norm(X, axis=0))
    if norm > 0:
        X = X / norm
        s = s * norm
    return s, P, t, X


# ---------------------------------------------------------------------------
# public API


def check_observations(obs: ObservationMatrix):
    M = obs.frame_known
    per_col = M.sum(0)
    bad = np.flatnonzero(per_col < 2)
    if bad.size:
        raise ValidationError(f"column {bad[0]} has fewer than 2 observed frames")
    sparse = obs.sparse_frames()
    if sparse.size:
        log.warning("%d frames have fewer than 4 observed points", sparse.size)
    return sparse


def factorize(obs: ObservationMatrix, max_iters: int = 500, tol: float = 1e-9, seed=None,
              inner_steps: int = 8) -> FactorizationResult:
    """Scaled orthographic factorization of a partially observed matrix.

    Gauge: frame 0 has identity rotation, the shape centroid is at the
    origin and the mean shape-point norm is 1. ``seed`` is accepted for
    interface symmetry; the solver is deterministic.
    """
    check_observations(obs)
    O = obs.frames()
    M = obs.frame_known
    w = obs.row_weights
    F, K = M.shape

    # Columns seen in only two frames barely constrain the affine motion but,
    # when they are not exactly rigid, bias it away from any metric solution.
    # The motion is therefore estimated from the better observed columns and
    # the remaining ones are triangulated afterwards.
    count = M.sum(0)
    core = count >= 3
    if core.sum() < 4 or core.all():
        core = np.ones(K, bool)
    Oc, Mc = O[:, core], M[:, core]
    init = _incremental_init(Oc, Mc, w)
    if init is None:
        log.info("incremental initialization failed; using the imputed SVD")
        init = _affine_init(Oc, Mc, w)
    A, t, Xc = init
    A, t, Xc, it_a = _affine_als(Oc, Mc, w, A, t, Xc, max_iters, tol)
    X = np.zeros((3, K))
    X[:, core] = Xc
    if not core.all():
        X = _solve_shape(O, M, w, A, t)

    sv = np.linalg.svd(A.reshape(2 * F, 3), compute_uv=False)
    if sv[0] == 0 or sv[2] < 1e-7 * sv[0]:
        raise DegenerateMotionError("degenerate motion: views do not constrain depth")

    Q = _metric_upgrade(A, w)
    s, P = _stiefel_project(A @ Q)
    B = s[:, None, None] * P
    X = np.linalg.solve(Q, X)
    R = _full_rotation(P)
    spread = np.max(np.linalg.norm(R[:, 2] - R[0, 2], axis=1))
    spread = min(spread, np.max(np.linalg.norm(R[:, 2] + R[0, 2], axis=1)))
    if spread < 1e-6:
        raise DegenerateMotionError("degenerate motion: all views share one viewing direction")

    # cameras of sparsely observed frames can be far off after the upgrade;
    # settle them before they get to pull on the shape
    B, t = _update_motions(O, M, X, B, inner=max(inner_steps, 100))
    floor = _floor(O, M, w)
    prev = _objective(O, M, w, B, t, X)
    history = [prev]
    converged = False
    it_b = 0
    for it_b in range(1, max_iters + 1):
        X = _solve_shape(O, M, w, B, t)
        B, t = _update_motions(O, M, X, B, inner=inner_steps)
        cur = _objective(O, M, w, B, t, X)
        history.append(cur)
        if cur <= floor or (prev - cur) <= tol * max(prev, 1e-300):
            converged = True
            break
        prev = cur
    if not converged:
        log.warning("factorization hit max_iters=%d", max_iters)

    s, P, t, X = _gauge_fix(B, t, X)
    R = _full_rotation(P)
    motions = [Motion(R[f], float(s[f]), t[f].copy()) for f in range(F)]
    B = s[:, None, None] * P
    pred = _predict(B, t, X)
    completed = np.empty((2 * F, K))
    completed[0::2] = pred[..., 0]
    completed[1::2] = pred[..., 1]
    res = FactorizationResult(X, motions, completed, 0.0, it_a + it_b, converged, history)
    object.__setattr__(res, "residual", reprojection_residual(obs, res))
    return res


def _blocks(motions):
    B = np.stack([m.scale * np.asarray(m.rotation)[:2] for m in motions])
    t = np.stack([np.asarray(m.translation, float) for m in motions])
    return B, t


def frame_sq_errors(obs: ObservationMatrix, shape, motions) -> np.ndarray:
    """Per-frame sums of squared reprojection errors over known points, each exactly rounded."""
    B, t = _blocks(motions)
    e = _sq_errors(obs.frames(), obs.frame_known, B, t, np.asarray(shape, float))
    return np.array([math.fsum(row) for row in e])


def weighted_objective(obs: ObservationMatrix, shape, motions) -> float:
    """Weighted sum of squared errors.

    Integer weights are expanded into repeated terms of an exactly rounded
    sum, so the value equals the unweighted objective of the matrix with those
    frames physically duplicated.
    """
    e = frame_sq_errors(obs, shape, motions)
    terms = []
    for wf, ef in zip(obs.row_weights, e):
        if float(wf).is_integer():
            terms.extend([ef] * int(wf))
        else:
            terms.append(wf * ef)
    return math.fsum(terms)


def reprojection_residual(obs: ObservationMatrix, result: FactorizationResult) -> float:
    """Weighted RMS reprojection error per known point, in pixels."""
    e = frame_sq_errors(obs, result.shape, result.motions)
    w = obs.row_weights
    n = obs.frame_known.sum(1)
    den = float(np.sum(w * n))
    return math.sqrt(math.fsum(w * e) / den) if den > 0 else 0.0
