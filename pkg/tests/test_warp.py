import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from vvn.core import ValidationError
from vvn.warp import (
    AffineMap2D, DegenerateControlsError, ThinPlateSpline, eval_tps, fit_affine_box,
    fit_keypoint_warp, fit_tps, tps_kernel, warp_cost,
)

seeds = st.integers(0, 2**32 - 1)


def _controls(rng, n):
    return rng.uniform(0, 150, (n, 2))


def _well_spread(src):
    d = np.linalg.norm(src[:, None] - src[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min() > 1.0


def naive_eval(tps, pts):
    out = []
    for x in pts:
        g = tps.affine_part[:, :2] @ x + tps.affine_part[:, 2]
        for c, w in zip(tps.control_points, tps.kernel_weights):
            r = math.hypot(*(x - c))
            g = g + w * (r * r * math.log(r) if r > 0 else 0.0)
        out.append(g)
    return np.array(out)


def test_kernel_at_zero_and_one():
    np.testing.assert_array_equal(tps_kernel([0.0, 1.0]), [0.0, 0.0])
    assert tps_kernel(math.e) == pytest.approx(math.e ** 2)


def test_identity_fit():
    src = _controls(np.random.default_rng(0), 8)
    tps = fit_tps(src, src)
    assert np.abs(tps.kernel_weights).max() < 1e-9
    np.testing.assert_allclose(tps.affine_part, [[1, 0, 0], [0, 1, 0]], atol=1e-9)


@given(seeds, st.integers(3, 20))
def test_interpolates_controls(seed, n):
    rng = np.random.default_rng(seed)
    src = _controls(rng, n)
    assume(_well_spread(src))
    dst = src + rng.normal(0, 10, src.shape)
    try:
        tps = fit_tps(src, dst)
    except DegenerateControlsError:
        assume(False)
    np.testing.assert_allclose(eval_tps(tps, src), dst, rtol=0, atol=1e-7)
    W = tps.kernel_weights
    np.testing.assert_allclose(W.sum(0), 0, atol=1e-8)
    np.testing.assert_allclose(W.T @ src, 0, atol=1e-8 * max(1.0, np.abs(src).max()))


@given(seeds)
def test_affine_data_has_no_bending(seed):
    rng = np.random.default_rng(seed)
    src = _controls(rng, 10)
    A = rng.normal(0, 1, (2, 2))
    b = rng.normal(0, 20, 2)
    tps = fit_tps(src, src @ A.T + b)
    assert tps.bending_energy() < 1e-10
    np.testing.assert_allclose(tps.affine_part[:, :2], A, atol=1e-9)


def test_four_points_exact():
    src = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [7.0, 9.0]])
    dst = np.array([[3.0, 1.0], [-4.0, 2.0], [5.0, 5.0], [0.0, 0.0]])
    np.testing.assert_allclose(fit_tps(src, dst)(src), dst, atol=1e-7)


@given(seeds)
def test_eval_matches_direct_sum(seed):
    rng = np.random.default_rng(seed)
    src = _controls(rng, 6)
    tps = fit_tps(src, src + rng.normal(0, 5, src.shape))
    pts = rng.uniform(-20, 170, (100, 2))
    np.testing.assert_allclose(eval_tps(tps, pts), naive_eval(tps, pts), rtol=1e-12, atol=1e-9)


def test_far_field_pure_affine_exact():
    tps = ThinPlateSpline(np.zeros((3, 2)), np.array([[2.0, 0.5, 1.0], [0.0, 3.0, -2.0]]),
                          np.zeros((3, 2)))
    x = np.array([[1e6, 1e6]])
    np.testing.assert_array_equal(eval_tps(tps, x), [[2e6 + 0.5e6 + 1.0, 3e6 - 2.0]])


def test_regularized_residual_grows_with_lambda():
    rng = np.random.default_rng(3)
    src = _controls(rng, 12)
    dst = src + rng.normal(0, 8, src.shape)
    res = [np.linalg.norm(fit_tps(src, dst, lam)(src) - dst) for lam in (0.0, 10.0, 1000.0, 1e5)]
    assert all(a < b for a, b in zip(res, res[1:]))


def test_degenerate_controls():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    with pytest.raises(DegenerateControlsError):
        fit_tps(line, line)
    dup = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [0.0, 5.0]])
    with pytest.raises(DegenerateControlsError):
        fit_tps(dup, dup + [[0, 0], [0, 0], [0, 0], [1, 1]])
    with pytest.raises(ValidationError):
        fit_tps(line[:2], line[:2])


def test_keypoint_warp_fallbacks():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    g = fit_keypoint_warp(line, 2 * line)
    np.testing.assert_allclose(g(line), 2 * line, atol=1e-6)
    two = fit_keypoint_warp([[0.0, 0.0], [10.0, 5.0]], [[0.0, 0.0], [20.0, 5.0]])
    assert isinstance(two, AffineMap2D)
    np.testing.assert_allclose(two.matrix, np.diag([2.0, 1.0]))
    one = fit_keypoint_warp([[1.0, 1.0]], [[4.0, 5.0]])
    np.testing.assert_allclose(one([[0.0, 0.0]]), [[3.0, 4.0]])


def test_box_identity():
    h = fit_affine_box((0, 0, 10, 20), (0, 0, 10, 20))
    np.testing.assert_array_equal(h.matrix, np.eye(2))
    np.testing.assert_array_equal(h.offset, [0, 0])


def test_box_scaling_and_offset():
    src = [[0, 0], [100, 0], [0, 50], [100, 50]]
    dst = [[10, 10], [210, 10], [10, 110], [210, 110]]
    h = fit_affine_box(src, dst)
    np.testing.assert_allclose(h.matrix, np.diag([2.0, 2.0]))
    np.testing.assert_allclose(h.offset, [10, 10])
    np.testing.assert_allclose(h(np.array(src, float)), dst)


def test_box_anisotropic():
    h = fit_affine_box((0, 0, 10, 10), (0, 0, 20, 5))
    np.testing.assert_allclose(h.matrix, np.diag([2.0, 0.5]))


@given(seeds)
def test_box_inverse_composes_to_identity(seed):
    rng = np.random.default_rng(seed)
    a = np.sort(rng.uniform(0, 100, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
    b = np.sort(rng.uniform(0, 100, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
    assume(a[2] - a[0] > 1 and a[3] - a[1] > 1 and b[2] - b[0] > 1 and b[3] - b[1] > 1)
    f, g = fit_affine_box(a, b), fit_affine_box(b, a)
    x = rng.uniform(0, 100, (10, 2))
    np.testing.assert_allclose(g(f(x)), x, rtol=0, atol=1e-12)


def test_box_zero_area():
    with pytest.raises(ValidationError):
        fit_affine_box((0, 0, 0, 10), (0, 0, 5, 5))


def test_warp_cost_cases():
    ident = AffineMap2D(np.eye(2), np.zeros(2))
    assert warp_cost([0, 0], [3, 4], ident) == 5.0
    assert warp_cost([2, 2], [2, 2], ident) == 0.0
    rng = np.random.default_rng(1)
    src = _controls(rng, 5)
    dst = src + rng.normal(0, 4, src.shape)
    tps = fit_tps(src, dst)
    np.testing.assert_allclose(warp_cost(src, dst, tps), 0, atol=1e-7)


def test_warp_cost_rejects_nonfinite():
    with pytest.raises(ValidationError):
        warp_cost([np.nan, 0], [0, 0], AffineMap2D(np.eye(2), np.zeros(2)))
