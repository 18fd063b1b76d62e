import json
import math

import numpy as np
import pytest

from heightnerf import heightfield as hfm
from heightnerf.geometry import Camera, look_at, ray_for_pixel
from heightnerf.partition import PartitionConfig, build_partition, groups_of_points
from heightnerf.scenegen import (AnalyticScene, DatasetSpec, SceneGenerationError, SceneSpec, analytic_field,
                                 cameras_from_transforms, dataset_cameras, empty_scene, generate_dataset,
                                 heightfield_from_footprints, load_dataset, make_city_heightfield, make_scene,
                                 render_oracle, split_indices)


def test_forced_footprint():
    hf, ids = heightfield_from_footprints([(1, 2, 1, 2, 20.0)], 5, 5, 1.0)
    want = np.zeros((5, 5))
    want[1:3, 1:3] = 20
    np.testing.assert_array_equal(hf.heights, want)
    assert (ids > 0).sum() == 4


def test_city_deterministic_and_degenerate_range():
    a = make_city_heightfield(4, 8.0, (10, 10), 0.25, seed=5)
    b = make_city_heightfield(4, 8.0, (10, 10), 0.25, seed=5)
    np.testing.assert_array_equal(a[0].heights, b[0].heights)
    assert set(np.unique(a[0].heights)) == {0.0, 10.0}


def test_city_footprints_disjoint():
    hf, ids, fps = make_city_heightfield(6, 10.0, (1, 3), 0.25, seed=2)
    assert len(fps) == 6
    assert set(np.unique(ids)) == set(range(7))
    # no two buildings share an edge-adjacent cell
    for k in range(1, 7):
        m = ids == k
        grown = m.copy()
        grown[1:] |= m[:-1]
        grown[:-1] |= m[1:]
        grown[:, 1:] |= m[:, :-1]
        grown[:, :-1] |= m[:, 1:]
        assert not np.any(grown & (ids > 0) & (ids != k))


def test_city_placement_failure():
    with pytest.raises(SceneGenerationError, match="placed only"):
        make_city_heightfield(50, 3.0, (1, 2), 0.25, seed=0, max_retries=20)


def test_analytic_field_examples():
    hf, ids = heightfield_from_footprints([(1, 2, 1, 2, 4.0)], 5, 5, 1.0)
    sc = AnalyticScene(hf, ids, np.array([[0, 0, 0], [0.9, 0.1, 0.2]]))
    rgb, sigma = analytic_field(sc, np.array([[1.5, 1.5, 5.0], [1.5, 1.5, 2.0], [4.5, 4.5, 5.0], [4.5, 4.5, -0.2]]))
    assert sigma.tolist() == [0.0, 20.0, 0.0, 20.0]
    np.testing.assert_allclose(rgb[1], [0.9, 0.1, 0.2])
    np.testing.assert_allclose(rgb[3], sc.ground_color)


def test_field_agrees_with_partition():
    sc = make_scene(SceneSpec(seed=4))
    part = build_partition(sc.heightfield, PartitionConfig(m_groups=4, threshold=0.5))
    g = np.random.default_rng(0)
    pts = np.column_stack([g.uniform(-4, 4, 5000), g.uniform(-4, 4, 5000), g.uniform(-1, 4, 5000)])
    _, sigma = analytic_field(sc, pts)
    groups = groups_of_points(part, pts)
    in_slab = (pts[:, 2] <= 0) & (pts[:, 2] >= -sc.ground_thickness)
    np.testing.assert_array_equal(sigma > 0, (groups > 0) | in_slab)


def test_empty_scene_is_sky():
    sc = empty_scene()
    cam = Camera(look_at(np.array([6.0, 0, 3]), np.zeros(3)), 0.8, 8, 8, 1.0, 14.0)
    img = render_oracle(sc, cam, 64).pixels
    np.testing.assert_allclose(img, np.broadcast_to(sc.sky_color, img.shape))


def test_top_down_building_color():
    hf, ids = heightfield_from_footprints([(0, 7, 0, 7, 2.0)], 8, 8, 0.5, origin=(-2, -2))
    sc = AnalyticScene(hf, ids, np.array([[0, 0, 0], [0.8, 0.3, 0.1]]), sigma_solid=200.0)
    cam = Camera(look_at(np.array([0.0, 0, 6]), np.zeros(3)), 0.5, 4, 4, 1.0, 9.0)
    img = render_oracle(sc, cam, 256).pixels
    np.testing.assert_allclose(img, np.broadcast_to([0.8, 0.3, 0.1], img.shape), atol=1e-3)


def test_n_dense_minimum():
    with pytest.raises(ValueError):
        render_oracle(empty_scene(), Camera(np.eye(4), 1.0, 2, 2, 0, 1), 32)


def _default_camera():
    return dataset_cameras(make_scene(SceneSpec()), DatasetSpec(num_views=8, image_size=32))[0]


def test_oracle_converges_monotonically():
    sc = make_scene(SceneSpec())
    cam = _default_camera()
    ref = render_oracle(sc, cam, 4096).pixels
    errs = [np.abs(render_oracle(sc, cam, n).pixels - ref).mean() for n in (128, 256, 512, 1024)]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


def test_oracle_doubling_changes_pixels_below_1e3():
    # stated per-pixel bound, checked as a maximum over the image
    sc = make_scene(SceneSpec())
    cam = _default_camera()
    diff = np.abs(render_oracle(sc, cam, 512).pixels - render_oracle(sc, cam, 1024).pixels)
    assert diff.max() < 1e-3, f"max {diff.max():.3g}, mean {diff.mean():.3g}, share > 1e-3 {(diff.max(-1) > 1e-3).mean():.3f}"


def test_split_counts():
    # indices 0, 8, ..., 96 are held out: 13 test and 87 train views
    train, test = split_indices(100, 8)
    assert test == list(range(0, 100, 8))
    assert (len(train), len(test)) == (87, 13)
    assert sorted(train + test) == list(range(100))


def test_no_top_views_without_flag():
    sc = make_scene(SceneSpec())
    for top, want_any in ((False, False), (True, True)):
        cams = dataset_cameras(sc, DatasetSpec(num_views=20, include_top_views=top))
        elev = []
        for c in cams:
            v = c.position - sc.center()
            elev.append(math.degrees(math.atan2(v[2], math.hypot(v[0], v[1]))))
        assert any(e > 60 for e in elev) == want_any


def test_dataset_layout_and_determinism(tmp_path, small_scene):
    spec = DatasetSpec(num_views=9, image_size=10, n_dense=64)
    generate_dataset(small_scene, spec, tmp_path / "a")
    generate_dataset(small_scene, spec, tmp_path / "b")
    for name in ("transforms.json", "heightfield.json", "split.json", "scene.json", "images/000.png", "images/008.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    tf = json.loads((tmp_path / "a" / "transforms.json").read_text())
    assert {"camera_angle_x", "frames"} <= set(tf)
    assert {"file_path", "transform_matrix"} <= set(tf["frames"][0])
    assert np.asarray(tf["frames"][0]["transform_matrix"]).shape == (4, 4)
    split = json.loads((tmp_path / "a" / "split.json").read_text())
    assert split["test"] == [0, 8]


def test_dataset_round_trip_cameras(tmp_path, small_scene):
    spec = DatasetSpec(num_views=3, image_size=6, n_dense=64)
    generate_dataset(small_scene, spec, tmp_path)
    cams = dataset_cameras(small_scene, spec)
    parsed = cameras_from_transforms(json.loads((tmp_path / "transforms.json").read_text()))
    for a, b in zip(cams, parsed):
        for px, py in ((0, 0), (5, 2), (3, 5)):
            ra, rb = ray_for_pixel(a, px, py), ray_for_pixel(b, px, py)
            np.testing.assert_allclose(ra.origin, rb.origin, atol=1e-9)
            np.testing.assert_allclose(ra.direction, rb.direction, atol=1e-9)
    hf = hfm.load(tmp_path / "heightfield.json")
    np.testing.assert_array_equal(hf.heights, small_scene.heightfield.heights)
    ds = load_dataset(tmp_path)
    assert ds.images.shape == (3, 6, 6, 3)


def test_unwritable_output(tmp_path, small_scene):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        generate_dataset(small_scene, DatasetSpec(num_views=1, image_size=4, n_dense=64), blocker / "sub")


def test_scene_json_round_trip(small_scene):
    back = AnalyticScene.from_json_dict(json.loads(json.dumps(small_scene.to_json_dict())))
    np.testing.assert_array_equal(back.footprint_ids, small_scene.footprint_ids)
    assert back.to_json_dict() == small_scene.to_json_dict()
