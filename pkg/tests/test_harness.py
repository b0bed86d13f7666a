import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vvn.core import Camera, KeypointSet, ValidationError
from vvn.geometry import random_rotations, rotation_from_axis_angle
from vvn.harness import (
    N_POSE_BINS, BenchmarkReport, ReconErrorReport, alignment_error, azimuth_of, benchmark_alignment,
    error_vs_viewpoint_curve, evaluate_alignment, fmt, predict_pose_retrieval, pose_error_deg,
    reconstruction_error, snap_azimuth, topk_oracle_pose, write_curves_csv, write_pairs_csv,
)
from vvn.network import compress, random_docking, random_network
from vvn.synth import SynthConfig, generate, get_model, split

seeds = st.integers(0, 2**32 - 1)


def _kps(points, visible=None):
    points = np.asarray(points, float)
    vis = np.ones(len(points), bool) if visible is None else np.asarray(visible)
    return KeypointSet([f"k{i}" for i in range(len(points))], points, vis)


def test_alignment_error_three_four_five():
    grid = np.array([[10.0, 10.0], [40.0, 40.0]])
    matched = np.array([[13.0, 14.0], [0.0, 0.0]])
    assert alignment_error(matched, _kps([[11, 9]]), _kps([[10, 10]]), grid) == 5.0


def test_alignment_error_perfect_and_unmatched():
    rng = np.random.default_rng(0)
    grid = rng.uniform(0, 100, (50, 2))
    kp = _kps(grid[:5])
    assert alignment_error(grid, kp, kp, grid) == 0.0
    matched = grid.copy()
    matched[0] = np.nan  # unmatched keypoint is left out
    assert alignment_error(matched, kp, kp, grid) == 0.0


def test_alignment_error_needs_shared_keypoint():
    grid = np.zeros((3, 2))
    with pytest.raises(ValidationError):
        alignment_error(grid, _kps([[0, 0], [1, 1]], [True, False]), _kps([[0, 0], [1, 1]], [False, True]), grid)


@given(seeds, st.floats(2.0, 10.0))
def test_self_pair_error_bounded_by_stride(seed, stride):
    rng = np.random.default_rng(seed)
    xs = np.arange(0, 150 + stride, stride)
    grid = np.stack(np.meshgrid(xs, xs), -1).reshape(-1, 2)
    kp = _kps(rng.uniform(0, xs[-1], (10, 2)))
    assert alignment_error(grid, kp, kp, grid) <= stride * math.sqrt(2) / 2 + 1e-9


def test_random_matching_matches_baseline():
    coll, _ = generate(get_model("car", 150), SynthConfig(n_instances=2, n_grid_points=150, seed=1))
    a, b = coll.instances
    rng = np.random.default_rng(0)
    shared = np.flatnonzero(a.keypoints.visible & b.keypoints.visible)
    # expected error of a uniformly random match, computed in closed form
    baseline = np.mean([np.linalg.norm(b.grid.points - b.keypoints.positions[u], axis=1).mean() for u in shared])
    draws = [alignment_error(b.grid.points[rng.integers(len(b.grid), size=len(a.grid))], a.keypoints,
                             b.keypoints, a.grid.points) for _ in range(2000)]
    se = np.std(draws) / math.sqrt(len(draws))
    assert abs(np.mean(draws) - baseline) < 4 * se


def test_curve_single_bin_is_global_mean():
    errs = [1.0, 2.0, 6.0]
    curve = error_vs_viewpoint_curve([5.0, 10.0, 29.0], errs)
    assert curve[0].count == 3 and curve[0].mean_error == pytest.approx(3.0)
    assert all(b.count == 0 and math.isnan(b.mean_error) for b in curve[1:])


def test_curve_default_bins_cover_half_turn():
    curve = error_vs_viewpoint_curve([0.0, 30.0, 89.9, 180.0], [1, 2, 3, 4])
    assert [(b.lo, b.hi) for b in curve] == [(30.0 * k, 30.0 * (k + 1)) for k in range(6)]
    assert [b.count for b in curve] == [1, 1, 1, 0, 0, 1]
    assert len(error_vs_viewpoint_curve([1.0], [1.0], 45.0)) == 4
    with pytest.raises(ValidationError):
        error_vs_viewpoint_curve([], [])


def test_evaluate_alignment_reports(rigid_synth, tmp_path):
    train, test, _, _, net, comp = rigid_synth
    a = evaluate_alignment(train, test, network=net, compressed=comp)
    b = evaluate_alignment(train, test, network=net, compressed=comp, threads=2)
    assert set(a) == {"vvn", "euclid"}
    for m in a:
        assert a[m].errors == b[m].errors and a[m].test_ids == b[m].test_ids
        assert min(a[m].errors) >= 0 and 0 <= min(a[m].viewpoint_deg) <= max(a[m].viewpoint_deg) <= 180
    write_curves_csv(a, tmp_path / "c.csv")
    write_pairs_csv(a, tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == ["method", "bin_lo_deg", "bin_hi_deg", "n_pairs", "mean_error_px"]
    assert [r[0] for r in rows[1:]] == ["euclid"] * 6 + ["vvn"] * 6
    pairs = list(csv.reader(open(tmp_path / "p.csv")))
    assert len(pairs) == 1 + len(a["vvn"].errors) + len(a["euclid"].errors)
    with pytest.raises(ValidationError):
        evaluate_alignment(train, test, methods=("vvn",))


def test_csv_float_format():
    assert fmt(1 / 3) == "0.333333333"
    assert fmt(2.0) == "2" and fmt(np.int64(7)) == "7" and fmt(123456789.123) == "123456789"


def _cam(az_deg, el_deg=10.0):
    R = rotation_from_axis_angle([1, 0, 0], math.radians(el_deg)) @ rotation_from_axis_angle(
        [0, 0, 1], math.radians(az_deg))
    return Camera(R, 1.0, [0.0, 0.0])


@given(st.floats(-180, 180))
def test_snap_azimuth_bins(az):
    cam = _cam(az)
    s = snap_azimuth(cam)
    step = 360 / N_POSE_BINS
    deg = math.degrees(azimuth_of(s.rotation))
    assert abs(deg / step - round(deg / step)) < 1e-6
    assert pose_error_deg(s, cam) <= step / 2 + 1e-6
    np.testing.assert_allclose(snap_azimuth(s).rotation, s.rotation, atol=1e-9)


def test_retrieval_identical_instance():
    coll, _ = generate(get_model("car", 150), SynthConfig(n_instances=10, n_grid_points=150, seed=2))
    for inst in coll.instances[:4]:
        got = predict_pose_retrieval(inst, coll)
        np.testing.assert_allclose(got.rotation, snap_azimuth(inst.camera).rotation, atol=1e-12)
    assert N_POSE_BINS == 24


def test_retrieval_median_error_below_bin_width():
    coll, _ = generate(get_model("car", 150), SynthConfig(n_instances=160, n_grid_points=150,
                                                           descriptor_noise_sigma=0.1, seed=6))
    train, test = split(coll, 30)
    err1 = [pose_error_deg(predict_pose_retrieval(t, train), t.camera) for t in test.instances]
    err4 = [pose_error_deg(topk_oracle_pose(t, train, 4), t.camera) for t in test.instances]
    assert np.median(err1) < 360 / N_POSE_BINS
    assert np.all(np.array(err4) <= np.array(err1) + 1e-9)


@given(seeds)
def test_reconstruction_error_invariances(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((40, 3))
    R = random_rotations(1, rng)[0]
    Y = 2.5 * X @ R.T + rng.normal(0, 3, 3)
    e, _ = reconstruction_error(Y, X)
    assert e < 1e-9
    e, sign = reconstruction_error(Y * [1, 1, -1], X)
    assert e < 1e-9 and sign == -1
    noisy = X + rng.normal(0, 0.05, X.shape)
    e1, _ = reconstruction_error(noisy, X)
    e2, _ = reconstruction_error(noisy, X, diameter=2 * np.ptp(X, axis=0).max() * 10)
    assert e2 < e1


def test_recon_report_csv(tmp_path):
    rep = ReconErrorReport()
    rep.add("b", 0.04, 1, 1.5, 3.0, 400)
    rep.add("a", 0.06, -1, 2.0, 4.0, 400)
    rep.write_csv(tmp_path / "r.csv", timing=False)
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows == [["target_id", "rmse_fraction", "depth_sign", "residual_px", "n_points"],
                    ["a", "0.06", "-1", "2", "400"], ["b", "0.04", "1", "1.5", "400"]]
    np.testing.assert_array_equal(rep.fractions(), [0.04, 0.06])


def test_benchmark_gate_and_report():
    rng = np.random.default_rng(0)
    net = random_network(12, (20, 40), 4, rng)
    docks = [random_docking(net, 5, 4, rng) for _ in range(3)]
    rep = benchmark_alignment(net, compress(net), docks)
    assert isinstance(rep, BenchmarkReport) and rep.identical
    assert rep.n_nodes == net.n_nodes and rep.n_queries == 3 and rep.speedup > 0
    assert set(rep.as_dict()) >= {"speedup", "fast_seconds", "dijkstra_seconds"}
    other = random_network(12, (20, 40), 4, np.random.default_rng(1))
    with pytest.raises(AssertionError):
        benchmark_alignment(net, compress(other), docks)


def test_benchmark_time_grows_with_size():
    rng = np.random.default_rng(3)
    times = []
    for n in (20, 80, 320):
        net = random_network(n, 60, 6, rng)
        docks = [random_docking(net, 20, 8, rng) for _ in range(2)]
        times.append(benchmark_alignment(net, None, docks).dijkstra_seconds)
    assert times[0] < times[1] < times[2]
