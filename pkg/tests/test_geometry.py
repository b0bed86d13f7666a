import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vvn.core import (
    Camera, Collection, FeatureGrid, KeypointSet, NumericalError, ObjectInstance, ValidationError,
)
from vvn.factorization import DegenerateMotionError
from vvn.geometry import (
    augment_with_mirrors, depth_flip, estimate_cameras, mirror_camera, mirror_instance,
    procrustes_align, procrustes_rmse_min_depth, project, random_rotations,
    rotation_distance, rotation_from_axis_angle, so3_log,
)

from conftest import make_instance, random_camera

finite = st.floats(-1e3, 1e3, allow_nan=False)
vec3 = arrays(float, 3, elements=finite)
seeds = st.integers(0, 2**32 - 1)


def closed_form_distance(Ra, Rb):
    c = np.clip((np.trace(Ra @ Rb.T) - 1) / 2, -1, 1)
    return math.sqrt(2) * math.acos(c)


def test_project_drops_depth():
    cam = Camera(np.eye(3), 1.0, [0.0, 0.0])
    np.testing.assert_array_equal(project(cam, [[3, 4, 5]]), [[3, 4]])


@given(seeds)
def test_project_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    p = rng.standard_normal((20, 3)) * 10
    M = np.hstack([cam.scale * cam.rotation[:2], cam.translation[:, None]])
    ref = (M @ np.vstack([p.T, np.ones(20)])).T
    np.testing.assert_allclose(project(cam, p), ref, rtol=0, atol=1e-10)


@given(seeds, st.floats(0, 1))
def test_project_is_affine(seed, a):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    p, q = rng.standard_normal((2, 3)) * 20
    lhs = project(cam, a * p + (1 - a) * q)
    rhs = a * project(cam, p) + (1 - a) * project(cam, q)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(rhs).max()))


def test_project_rejects_nonfinite():
    with pytest.raises(ValidationError):
        project(Camera(np.eye(3), 1.0, [0, 0]), [[np.inf, 0, 0]])


def test_rotation_distance_zero_and_quarter_turn():
    R = random_rotations(1, np.random.default_rng(0))[0]
    assert rotation_distance(R, R) == pytest.approx(0, abs=1e-12)
    Rz = rotation_from_axis_angle([0, 0, 1], math.pi / 2)
    assert rotation_distance(R, R @ Rz) == pytest.approx(2.221441469079183, abs=1e-9)


@given(seeds)
def test_rotation_distance_closed_form(seed):
    Ra, Rb = random_rotations(2, np.random.default_rng(seed))
    assert rotation_distance(Ra, Rb) == pytest.approx(closed_form_distance(Ra, Rb), abs=1e-9)
    assert rotation_distance(Ra, Rb) == pytest.approx(rotation_distance(Rb, Ra), abs=1e-12)


@given(seeds)
def test_rotation_distance_triangle(seed):
    Ra, Rb, Rc = random_rotations(3, np.random.default_rng(seed))
    assert rotation_distance(Ra, Rc) <= rotation_distance(Ra, Rb) + rotation_distance(Rb, Rc) + 1e-9


@pytest.mark.parametrize("angle", [0.0, 1e-9, 1e-4, math.pi / 3, math.pi - 1e-7, math.pi])
def test_so3_log_edge_angles(angle):
    axis = np.array([0.3, -0.5, 0.81])
    R = rotation_from_axis_angle(axis, angle)
    w = so3_log(R)
    assert np.linalg.norm(w, "fro") == pytest.approx(math.sqrt(2) * angle, abs=1e-9)
    np.testing.assert_allclose(w, -w.T, atol=1e-12)


def test_rotation_distance_batched():
    R = random_rotations(50, np.random.default_rng(3))
    d = rotation_distance(R[:25], R[25:])
    ref = [closed_form_distance(a, b) for a, b in zip(R[:25], R[25:])]
    np.testing.assert_allclose(d, ref, atol=1e-9)


def test_rotation_distance_rejects_reflection():
    with pytest.raises(ValidationError):
        rotation_distance(np.eye(3), np.diag([-1.0, 1, 1]))


def test_mirror_point_coordinates():
    inst = make_instance(width=100)
    m = mirror_instance(inst, np.arange(4))
    np.testing.assert_array_equal(m.grid.points[:, 0], 100 - inst.grid.points[:, 0])
    np.testing.assert_array_equal(m.mirror_table, np.arange(len(inst.grid)))


def test_mirror_is_involution_with_keypoint_swap():
    inst = make_instance(camera=Camera(np.eye(3), 1.0, [3.0, 4.0]))
    swap = np.array([1, 0, 3, 2])
    m = mirror_instance(inst, swap)
    np.testing.assert_array_equal(m.keypoints.positions[0], [inst.width - inst.keypoints.positions[1, 0],
                                                             inst.keypoints.positions[1, 1]])
    back = mirror_instance(m, swap)
    assert back.id == inst.id and back.keypoints.names == inst.keypoints.names
    np.testing.assert_array_equal(back.mask, inst.mask)
    np.testing.assert_array_equal(back.keypoints.visible, inst.keypoints.visible)
    np.testing.assert_allclose(back.keypoints.positions, inst.keypoints.positions, rtol=0, atol=1e-12)
    np.testing.assert_allclose(back.grid.points, inst.grid.points, rtol=0, atol=1e-12)
    assert back.camera == inst.camera
    # dyadic coordinates survive the double flip bit for bit
    q = replace(inst, grid=FeatureGrid(np.round(inst.grid.points * 4) / 4, inst.grid.descriptors))
    assert mirror_instance(mirror_instance(q, swap), swap).grid == q.grid


def test_mirror_requires_swap():
    with pytest.raises(ValidationError):
        mirror_instance(make_instance(), None)


def test_mirror_camera_reprojects_reflected_shape(small_synth):
    coll, gt = small_synth
    for inst in coll.instances[:6]:
        m = mirror_instance(inst, coll.symmetry_swap)
        P = gt.grid_points3d(inst.id) * [-1, 1, 1]
        np.testing.assert_allclose(project(m.camera, P), m.grid.points, rtol=0, atol=1e-9)


@given(seeds)
def test_mirror_preserves_pair_distances(seed):
    rng = np.random.default_rng(seed)
    a, b = random_camera(rng), random_camera(rng)
    ma, mb = mirror_camera(a, 120), mirror_camera(b, 80)
    assert rotation_distance(ma.rotation, mb.rotation) == pytest.approx(
        rotation_distance(a.rotation, b.rotation), abs=1e-9)


def test_augment_with_mirrors_order(small_synth):
    coll, _ = small_synth
    aug = augment_with_mirrors(coll)
    assert len(aug) == 2 * len(coll)
    assert aug.instances[len(coll)].id == coll.instances[0].id + "#mirror"


def test_procrustes_identity():
    A = np.random.default_rng(1).standard_normal((10, 3))
    tf, rmse = procrustes_align(A, A)
    assert rmse < 1e-12 and tf.scale == pytest.approx(1)
    np.testing.assert_allclose(tf.rotation, np.eye(3), atol=1e-12)


def test_procrustes_recovers_similarity():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((30, 3))
    R = rotation_from_axis_angle([0, 0, 1], math.radians(30))
    t = np.array([1.0, -2.0, 0.5])
    tf, rmse = procrustes_align(A, 2 * A @ R.T + t)
    assert rmse < 1e-9
    assert tf.scale == pytest.approx(2, abs=1e-12)
    np.testing.assert_allclose(tf.rotation, R, atol=1e-12)
    np.testing.assert_allclose(tf.translation, t, atol=1e-12)


@pytest.mark.parametrize("sigma", [0.01, 0.1])
def test_procrustes_noise_level(sigma):
    rng = np.random.default_rng(7)
    A = rng.standard_normal((100, 3)) * 5
    _, rmse = procrustes_align(A, A + sigma * rng.standard_normal(A.shape))
    assert 0.5 * sigma <= rmse <= 2 * sigma


@given(seeds)
def test_procrustes_invariant_to_common_similarity(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((12, 3))
    B = A + 0.1 * rng.standard_normal(A.shape)
    R = random_rotations(1, rng)[0]
    s, t = rng.uniform(0.5, 2), rng.standard_normal(3)
    _, r1 = procrustes_align(A, B)
    _, r2 = procrustes_align(s * A @ R.T + t, s * B @ R.T + t)
    assert r2 == pytest.approx(s * r1, rel=1e-7, abs=1e-12)


def test_procrustes_degenerate():
    A = np.zeros((5, 3))
    A[:, 0] = np.arange(5)
    with pytest.raises(NumericalError):
        procrustes_align(A, A)
    with pytest.raises(ValidationError):
        procrustes_align(A[:2], A[:2])


def test_min_depth_picks_flipped():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((20, 3))
    rmse, sign, _ = procrustes_rmse_min_depth(depth_flip(A), A)
    assert sign == -1 and rmse < 1e-12


def _keypoint_collection(rng, n_views=10, z=10, missing=0.0, same_view=False):
    S = rng.standard_normal((z, 3)) * 20
    R0 = random_rotations(1, rng)[0]
    names = [f"k{i}" for i in range(z)]
    insts = []
    for f in range(n_views):
        R = R0 if same_view else random_rotations(1, rng)[0]
        cam = Camera(R, 1.0, [100.0, 100.0])
        vis = rng.random(z) >= missing
        vis[:4] = True
        kp = np.where(vis[:, None], project(cam, S), 0.0)
        grid = FeatureGrid([[100.0, 100.0]], [[0.0]])
        insts.append(ObjectInstance(str(f), (200, 200), np.ones((200, 200), bool), grid,
                                    KeypointSet(names, kp, vis), cam))
    return Collection("kp", insts, np.arange(z))


def _triangulate_rmse(coll, cams):
    """Least-squares keypoint positions given the cameras, then the reprojection RMS."""
    z = coll.n_keypoints
    sq, n = 0.0, 0
    for k in range(z):
        rows, rhs = [], []
        for c, inst in zip(cams, coll.instances):
            if inst.keypoints.visible[k]:
                rows.append(c.scale * c.rotation[:2])
                rhs.append(inst.keypoints.positions[k] - c.translation)
        A, b = np.vstack(rows), np.concatenate(rhs)
        x = np.linalg.lstsq(A, b, rcond=None)[0]
        sq += np.sum((A @ x - b) ** 2)
        n += len(rows)
    return math.sqrt(sq / n)


def test_estimate_cameras_noiseless():
    coll = _keypoint_collection(np.random.default_rng(5))
    cams = estimate_cameras(coll)
    R0 = coll.instances[0].camera.rotation
    np.testing.assert_allclose(cams[0].rotation, np.eye(3), atol=1e-9)
    errs = []
    for sign in (1, -1):
        D = np.diag([1, 1, sign])
        errs.append(max(rotation_distance(D @ c.rotation @ D, i.camera.rotation @ R0.T)
                        for c, i in zip(cams, coll.instances)))
    assert min(errs) < 1e-3


def test_estimate_cameras_missing_keypoints():
    coll = _keypoint_collection(np.random.default_rng(6), n_views=14, missing=0.2)
    assert not all(i.keypoints.visible.all() for i in coll.instances)
    cams = estimate_cameras(coll)
    assert _triangulate_rmse(coll, cams) < 1.0


def test_estimate_cameras_keypoint_subset():
    coll = _keypoint_collection(np.random.default_rng(10))
    cams = estimate_cameras(coll, keypoint_subset=[0, 1, 2, 3, 4, 5])
    assert len(cams) == len(coll)


def test_estimate_cameras_identical_views_degenerate():
    coll = _keypoint_collection(np.random.default_rng(8), same_view=True)
    with pytest.raises(DegenerateMotionError):
        estimate_cameras(coll)


def test_estimate_cameras_needs_three():
    coll = _keypoint_collection(np.random.default_rng(9), n_views=2)
    with pytest.raises(ValidationError):
        estimate_cameras(coll)
