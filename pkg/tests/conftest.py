import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vvn.core import Camera, Collection, FeatureGrid, KeypointSet, ObjectInstance
from vvn.geometry import augment_with_mirrors
from vvn.network import build_network, compress
from vvn.synth import SynthConfig, generate, get_model

settings.register_profile(
    "vvn", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("vvn")


def make_instance(iid="a", n_points=10, dim=4, width=40, height=30, n_kp=4, seed=0, camera=None):
    """Small hand-built instance: full-frame mask, grid and keypoints strictly inside."""
    rng = np.random.default_rng(seed)
    mask = np.ones((height, width), bool)
    pts = rng.uniform([1, 1], [width - 1, height - 1], (n_points, 2))
    kps = rng.uniform([1, 1], [width - 1, height - 1], (n_kp, 2))
    return ObjectInstance(
        iid, (width, height), mask, FeatureGrid(pts, rng.standard_normal((n_points, dim))),
        KeypointSet([f"k{i}" for i in range(n_kp)], kps, np.ones(n_kp, bool)), camera,
    )


@pytest.fixture(scope="session")
def small_synth():
    """Noiseless-ish 16-instance car collection with ground truth."""
    cfg = SynthConfig(n_instances=16, n_grid_points=200, seed=3)
    return generate(get_model("car", 200), cfg)


@pytest.fixture(scope="session")
def small_network(small_synth):
    coll, _ = small_synth
    aug = augment_with_mirrors(coll)
    net = build_network(aug, k=6)
    return aug, net, compress(net)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_camera(rng, scale=None):
    from vvn.geometry import random_rotations
    R = random_rotations(1, rng)[0]
    s = rng.uniform(0.5, 3.0) if scale is None else scale
    return Camera(R, s, rng.uniform(-50, 50, 2))


def single_instance_collection(inst, swap=None):
    z = len(inst.keypoints)
    swap = np.arange(z) if swap is None else swap
    return Collection("toy", [inst], swap)


def oracle_alignment(test_id, n_points, collection, offsets, gt):
    """Ground-truth alignment: every visible true partner at distance 0."""
    from vvn.network import AlignmentResult

    J = len(collection)
    node = np.full((n_points, J), -1, np.int64)
    for j, inst in enumerate(collection.instances):
        corr = gt.correspondence(test_id, inst.id)
        ok = corr >= 0
        node[ok, j] = offsets[j] + corr[ok]
    return AlignmentResult(node, np.where(node >= 0, 0.0, np.inf), np.asarray(offsets).copy())


@pytest.fixture(scope="session")
def rigid_synth():
    """Exactly rigid, noiseless car views: 30 training instances plus 3 held out."""
    from vvn.synth import split

    cfg = SynthConfig(n_instances=33, n_grid_points=200, descriptor_noise_sigma=0.05,
                      keypoint_noise_sigma_px=0.0, deformation_scale=0.0, seed=21)
    coll, gt = generate(get_model("car", 200), cfg)
    train, test = split(coll, 3)
    aug = augment_with_mirrors(train)
    net = build_network(aug, k=10)
    return train, test, gt, aug, net, compress(net)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record and print one pass/fail line per acceptance criterion."""
    def record(number, title, ok, detail=""):
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
