import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from heightnerf.heightfield import HeightField, height_at
from heightnerf.partition import (BACKGROUND, PartitionConfig, ScenePartition, build_partition, classify_columns,
                                  cluster_object_columns, group_of_point, groups_of_points, kmeans)


def _hf(heights, ncols, nrows, cs=1.0, ox=0.0, oy=0.0):
    return HeightField(ox, oy, cs, ncols, nrows, heights)


def test_classify_strict_threshold():
    hf = _hf([0, 3, 12], 3, 1)
    assert classify_columns(hf, 5).tolist() == [[False, False, True]]
    assert not classify_columns(_hf([0, 0, 0], 3, 1), 0).any()
    assert not classify_columns(hf, 100).any()
    with pytest.raises(ValueError):
        classify_columns(hf, -1)


def test_well_separated_pairs():
    # 52x51 grid, object cells whose centers are (0,0),(1,0),(50,50),(51,50)
    hf = _hf(np.zeros(52 * 51), 52, 51, ox=-0.5, oy=-0.5)
    mask = np.zeros((51, 52), bool)
    mask[0, 0] = mask[0, 1] = mask[50, 50] = mask[50, 51] = True
    part = cluster_object_columns(mask, hf, PartitionConfig(m_groups=3))
    g = part.column_group
    assert g[0, 0] == g[0, 1] != g[50, 50] == g[50, 51]
    assert {g[0, 0], g[50, 50]} == {1, 2}


def test_single_group_centroid_is_mean():
    r = np.random.default_rng(0)
    h = (r.random(100) > 0.6) * 5.0
    hf = _hf(h, 10, 10)
    part = build_partition(hf, PartitionConfig(m_groups=2))
    mask = classify_columns(hf, 1.0)
    assert set(np.unique(part.column_group[mask])) == {1}
    np.testing.assert_allclose(part.centroids[0], hf.cell_centers()[mask].mean(axis=0))


def test_deterministic():
    r = np.random.default_rng(5)
    hf = _hf((r.random(100) > 0.5) * 3.0, 10, 10)
    a = build_partition(hf, PartitionConfig(m_groups=4, kmeans_seed=7))
    b = build_partition(hf, PartitionConfig(m_groups=4, kmeans_seed=7))
    np.testing.assert_array_equal(a.column_group, b.column_group)
    assert a.to_json() == b.to_json()


def test_fewer_cells_than_groups():
    h = np.zeros(25)
    h[[3, 17]] = 4.0
    part = build_partition(_hf(h, 5, 5), PartitionConfig(m_groups=6))
    labels = sorted(part.column_group.ravel()[[3, 17]].tolist())
    assert labels == [1, 2]
    assert part.centroids.shape == (2, 2)


def test_no_object_cells():
    part = build_partition(_hf(np.zeros(9), 3, 3), PartitionConfig(m_groups=3))
    assert (part.column_group == BACKGROUND).all()
    assert part.centroids.shape[0] == 0
    assert (part.label_image() == 0).all()


def test_group_of_point_rules():
    h = np.zeros(9)
    h[4] = 20.0
    hf = _hf(h, 3, 3)
    groups = np.zeros((3, 3), int)
    groups[1, 1] = 2
    part = ScenePartition(groups, np.zeros((2, 2)), PartitionConfig(m_groups=3), hf)
    assert group_of_point(part, 1.5, 1.5, 10) == 2
    assert group_of_point(part, 1.5, 1.5, 20) == 2
    assert group_of_point(part, 1.5, 1.5, 25) == BACKGROUND
    assert group_of_point(part, -4, 1.5, -3) == BACKGROUND
    assert group_of_point(part, 0.5, 0.5, -3) == BACKGROUND


def brute_force_group(hf, column_group, threshold, x, y, z):
    """Straight transcription of the division rule, one point at a time."""
    col = int(np.floor((x - hf.origin_x) / hf.cell_size))
    row = int(np.floor((y - hf.origin_y) / hf.cell_size))
    if not (0 <= col < hf.ncols and 0 <= row < hf.nrows):
        return 0
    h = float(hf.heights[row, col])
    if h == hf.nodata_value:
        h = 0.0
    if h <= threshold:
        return 0
    return int(column_group[row, col]) if z <= h else 0


def test_brute_force_oracle_grid():
    r = np.random.default_rng(11)
    h = np.where(r.random(400) > 0.55, r.uniform(0.5, 6, 400), 0.0)
    hf = _hf(h, 20, 20, cs=0.5, ox=-5, oy=-5)
    part = build_partition(hf, PartitionConfig(m_groups=5, threshold=1.0))
    centers = hf.cell_centers().reshape(-1, 2)
    pts = np.array([(x, y, z) for x, y in centers for z in np.linspace(-1, 7, 10)])
    got = groups_of_points(part, pts)
    want = [brute_force_group(hf, part.column_group, 1.0, *p) for p in pts]
    np.testing.assert_array_equal(got, want)


@given(st.integers(0, 10_000))
def test_monotone_in_z(seed):
    r = np.random.default_rng(seed)
    hf = _hf(r.uniform(0, 5, 16), 4, 4)
    part = build_partition(hf, PartitionConfig(m_groups=3, threshold=0.5))
    x, y = r.uniform(-1, 5, 2)
    zs = np.sort(r.uniform(-2, 7, 30))
    g = groups_of_points(part, np.column_stack([np.full(30, x), np.full(30, y), zs]))
    bg = g == BACKGROUND
    if bg.any():
        first = np.argmax(bg)
        assert bg[first:].all()
    # object groups only below the column height
    assert np.all(zs[~bg] <= height_at(hf, x, y))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_kmeans_objective_non_increasing(seed, k):
    pts = np.random.default_rng(seed).normal(size=(60, 2)) * [3, 1]
    res = kmeans(pts, k, seed=seed)
    hist = np.array(res.objective_history)
    assert np.all(np.diff(hist) <= 1e-9 * max(hist[0], 1))
    again = kmeans(pts, k, seed=seed)
    np.testing.assert_array_equal(res.labels, again.labels)


def test_kmeans_assignment_is_nearest():
    pts = np.random.default_rng(2).normal(size=(200, 2))
    res = kmeans(pts, 4, seed=1)
    d = ((pts[:, None] - res.centroids[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(res.labels, d.argmin(1))


def test_kmeans_empty_cluster_respawn():
    # duplicate points force k-means++ to draw coincident seeds
    pts = np.array([[0.0, 0.0]] * 10 + [[5.0, 5.0]])
    res = kmeans(pts, 3, seed=0)
    assert res.centroids.shape == (3, 2)
    assert np.isfinite(res.centroids).all()


def test_json_round_trip_and_png(tmp_path):
    r = np.random.default_rng(3)
    hf = _hf((r.random(36) > 0.5) * 2.0, 6, 6)
    part = build_partition(hf, PartitionConfig(m_groups=3))
    d = json.loads(part.to_json())
    assert set(d) >= {"centroids", "column_group", "config"}
    back = ScenePartition.from_json_dict(d, hf)
    np.testing.assert_array_equal(back.column_group, part.column_group)
    assert back.to_json() == part.to_json()
    part.save_png(tmp_path / "p.png")
    img = part.label_image()
    assert img.shape == (6, 6, 3)
    # background black, object groups not black; north (last row) drawn first
    assert (img[::-1][part.column_group == 0] == 0).all()
    assert (img[::-1][part.column_group > 0].sum(axis=1) > 0).all()


def test_config_validation():
    with pytest.raises(ValueError):
        PartitionConfig(m_groups=1)
    with pytest.raises(ValueError):
        PartitionConfig(threshold=-0.1)
