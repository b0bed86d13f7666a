import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vvn.core import (
    Camera, Collection, FeatureGrid, KeypointSet, ObjectInstance, ValidationError, load_collection,
    normalize_instance, rasterize_polygon, rle_decode, rle_encode, save_collection,
)
from vvn.geometry import mirror_instance

from conftest import make_instance


def _doc(instances):
    return {
        "format": "vvn-collection", "version": 1, "class_label": "toy",
        "keypoint_names": ["a", "b", "c", "d"], "symmetry_swap": [1, 0, 2, 3],
        "instances": instances,
    }


def _inst_json(iid="0", dim=3, n=10):
    pts = [[2.0 + 3 * k, 5.0] for k in range(n)]
    return {
        "id": iid, "image_size": [40, 20],
        "mask": {"shape": [20, 40], "rle": [0, 800]},
        "grid": {"stride": 8, "points": pts, "descriptors": [[0.1 * k] * dim for k in range(n)]},
        "keypoints": [{"name": nm, "position": [5.0 + i, 6.0], "visible": True}
                      for i, nm in enumerate("abcd")],
        "camera": None,
    }


def test_load_handwritten_minimal(tmp_path):
    p = tmp_path / "c.vvn"
    p.write_text(json.dumps(_doc([_inst_json()])))
    c = load_collection(p, target_height=None)
    assert c.n_keypoints == 4
    assert len(c.instances[0].grid) == 10


def test_load_rejects_descriptor_dim_mismatch(tmp_path):
    p = tmp_path / "c.vvn"
    p.write_text(json.dumps(_doc([_inst_json("0", 3), _inst_json("1", 5)])))
    with pytest.raises(ValidationError, match="descriptor dimension"):
        load_collection(p, target_height=None)


def test_load_names_missing_field(tmp_path):
    d = _inst_json()
    del d["grid"]
    p = tmp_path / "c.vvn"
    p.write_text(json.dumps(_doc([d])))
    with pytest.raises(ValidationError, match="'grid'"):
        load_collection(p)


def test_load_names_offending_instance(tmp_path):
    d = _inst_json("bad-7")
    d["keypoints"][0]["position"] = [500.0, 6.0]
    p = tmp_path / "c.vvn"
    p.write_text(json.dumps(_doc([d])))
    with pytest.raises(ValidationError, match="bad-7"):
        load_collection(p)


def test_polygon_mask_alternative(tmp_path):
    d = _inst_json()
    d["mask"] = {"polygon": [[0, 0], [40, 0], [40, 20], [0, 20]]}
    p = tmp_path / "c.vvn"
    p.write_text(json.dumps(_doc([d])))
    c = load_collection(p, target_height=None)
    assert c.instances[0].mask.all()


def test_empty_collection_round_trip(tmp_path):
    c = Collection("empty", [], [0])
    save_collection(c, tmp_path / "e.vvn")
    back = load_collection(tmp_path / "e.vvn")
    assert len(back) == 0 and back == c


def test_synthetic_round_trip_bit_exact(tmp_path, small_synth):
    coll, _ = small_synth
    save_collection(coll, tmp_path / "s.vvn")
    back = load_collection(tmp_path / "s.vvn", target_height=None)
    assert back == coll
    for a, b in zip(coll.instances, back.instances):
        assert a.grid.descriptors.tobytes() == b.grid.descriptors.tobytes()
        assert a.camera.rotation.tobytes() == b.camera.rotation.tobytes()


def test_hundred_instance_round_trip(tmp_path):
    from vvn.synth import SynthConfig, generate, get_model
    coll, _ = generate(get_model("boat", 120), SynthConfig(n_instances=100, n_grid_points=120,
                                                          descriptor_dim=8, seed=11))
    save_collection(coll, tmp_path / "b.vvn")
    assert load_collection(tmp_path / "b.vvn", target_height=None) == coll


def test_reflected_camera_rejected():
    with pytest.raises(ValidationError, match="determinant"):
        Camera(np.diag([-1.0, 1.0, 1.0]), 1.0, [0.0, 0.0])


def test_camera_rejects_bad_scale():
    with pytest.raises(ValidationError):
        Camera(np.eye(3), 0.0, [0.0, 0.0])


def test_grid_rejects_nonfinite():
    with pytest.raises(ValidationError):
        FeatureGrid([[1.0, np.nan]], [[0.0]])


def test_keypoints_outside_image_rejected():
    with pytest.raises(ValidationError, match="outside"):
        ObjectInstance("x", (10, 10), np.ones((10, 10), bool), FeatureGrid([[1.0, 1.0]], [[0.0]]),
                       KeypointSet(["a"], [[11.0, 2.0]], [True]))


def test_swap_must_be_involution():
    with pytest.raises(ValidationError, match="involution"):
        Collection("t", [make_instance()], [1, 2, 0, 3])


def _tall_instance(height=300, width=120):
    mask = np.zeros((height + 20, width), bool)
    mask[10:10 + height, 20:100] = True
    f = height / 300
    pts = np.array([[20.0, 10.0], [60.0, 10 + 140 * f], [99.0, 9 + height]])
    kps = np.array([[20.0, 10.0], [50.0, 10 + 90 * f]])
    cam = Camera(np.eye(3), 4.0, [8.0, 6.0])
    return ObjectInstance("t", (width, height + 20), mask, FeatureGrid(pts, np.eye(3)),
                          KeypointSet(["a", "b"], kps, [True, True]), cam)


def test_normalize_halves_coordinates():
    inst = _tall_instance()
    out = normalize_instance(inst, 150)
    x0, y0, x1, y1 = out.mask_bbox()
    assert y1 - y0 == 150
    np.testing.assert_array_equal(out.grid.points, inst.grid.points / 2)
    np.testing.assert_array_equal(out.keypoints.positions, inst.keypoints.positions / 2)
    assert out.camera.scale == 2.0
    np.testing.assert_array_equal(out.camera.translation, [4.0, 3.0])


def test_normalize_identity_at_target():
    inst = _tall_instance(150)
    assert normalize_instance(inst, 150) is inst


def test_normalize_top_left_corner():
    inst = _tall_instance()
    out = normalize_instance(inst, 150)
    x0, y0, _, _ = out.mask_bbox()
    # keypoint 0 sits on the original bbox corner (20, 10)
    np.testing.assert_allclose(out.keypoints.positions[0], [x0, y0])


def test_normalize_idempotent_and_commutes_with_mirror():
    inst = _tall_instance()
    once = normalize_instance(inst, 150)
    assert normalize_instance(once, 150) is once
    swap = [0, 1]
    a = normalize_instance(mirror_instance(inst, swap), 150)
    b = mirror_instance(normalize_instance(inst, 150), swap)
    assert a == b


def test_normalize_rejects_empty_mask():
    inst = make_instance()
    empty = ObjectInstance("e", inst.image_size, np.zeros_like(inst.mask),
                           FeatureGrid(np.zeros((0, 2)), np.zeros((0, 4))), inst.keypoints)
    with pytest.raises(ValidationError, match="empty mask"):
        normalize_instance(empty, 150)


@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_round_trip(mask):
    runs = rle_encode(mask)
    assert sum(runs) == mask.size
    np.testing.assert_array_equal(rle_decode(runs, mask.shape), mask)


def test_rle_rejects_bad_runs():
    with pytest.raises(ValidationError):
        rle_decode([3, 2], (2, 2))


def test_rasterize_square():
    m = rasterize_polygon([[1, 1], [4, 1], [4, 3], [1, 3]], (5, 6))
    assert m.sum() == 6
    assert m[1:3, 1:4].all()


def test_instances_are_read_only(small_synth):
    inst = small_synth[0].instances[0]
    with pytest.raises(ValueError):
        inst.grid.points[0, 0] = 1.0
    with pytest.raises(Exception):
        inst.id = "other"


def test_float_text_is_shortest_repr(tmp_path):
    inst = make_instance(seed=4)
    c = Collection("toy", [inst], np.arange(4))
    save_collection(c, tmp_path / "f.vvn")
    doc = json.loads((tmp_path / "f.vvn").read_text())
    v = doc["instances"][0]["grid"]["points"][0][0]
    assert v == inst.grid.points[0, 0] and math.isfinite(v)
