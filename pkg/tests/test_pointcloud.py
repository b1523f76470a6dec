import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pctrees.errors import DegenerateScale, EmptyCloud, FormatError, InvalidCount
from pctrees.pointcloud import (PointCloud, apply_scale, center, centroid, filter_min_points, fps,
                                fps_indices, fps_indices_batch, knn, knn_batch, normalize_unit,
                                read_manifest, read_xyz_csv, rescale_global, resample_fixed,
                                write_manifest, write_xyz_csv)


def cloud(pts, cid="c", **kw):
    return PointCloud(cid, np.asarray(pts, dtype=float), **kw)


coords = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                elements=st.floats(-50, 50, allow_nan=False, width=64))


# ---------------------------------------------------------------- construction

def test_cloud_rejects_empty_and_non_finite():
    with pytest.raises(EmptyCloud):
        cloud(np.zeros((0, 3)))
    with pytest.raises(FormatError):
        cloud([[0.0, np.nan, 1.0]])
    with pytest.raises(FormatError):
        cloud([[0.0, 1.0]])


def test_points_are_read_only_copies():
    src = np.zeros((2, 3))
    c = cloud(src)
    src[0, 0] = 5.0
    assert c.points[0, 0] == 0.0
    with pytest.raises(ValueError):
        c.points[0, 0] = 1.0


# ---------------------------------------------------------------- centroid and centering

@pytest.mark.parametrize("pts,want", [
    ([(0, 0, 0), (2, 0, 0)], (1, 0, 0)),
    ([(1, 1, 1)], (1, 1, 1)),
    ([(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)], (0.5, 0.5, 0)),
])
def test_centroid_examples(pts, want):
    np.testing.assert_allclose(centroid(cloud(pts)), want)


def test_center_example():
    np.testing.assert_allclose(center(cloud([(2, 2, 5), (4, 4, 7)])).points, [(-1, -1, 0), (1, 1, 2)])


def test_center_leaves_a_centered_cloud_alone():
    pts = [(-1.0, 0.5, 0.0), (1.0, -0.5, 2.0)]
    np.testing.assert_array_equal(center(cloud(pts)).points, pts)


@given(coords)
def test_center_is_idempotent_and_grounded(pts):
    once = center(cloud(pts + 5e5))
    twice = center(once)
    np.testing.assert_allclose(twice.points, once.points, atol=1e-9)
    assert np.abs(once.points[:, :2].mean(axis=0)).max() < 1e-9
    assert abs(once.points[:, 2].min()) < 1e-9


# ---------------------------------------------------------------- scaling

def test_rescale_global_examples():
    a = cloud([(10.0, 0, 0), (0, 1, 1)], "a")
    b = cloud([(0, -5.0, 0), (1, 1, 1)], "b")
    (ra, rb), s = rescale_global([a, b])
    assert s == 10.0
    assert np.abs(rb.points).max() == 0.5
    assert max(np.abs(ra.points).max(), np.abs(rb.points).max()) == 1.0

    unit = cloud([(1.0, 0, 0), (0, 0.5, 0)])
    (same,), s = rescale_global([unit])
    assert s == 1.0
    np.testing.assert_array_equal(same.points, unit.points)


def test_rescale_global_errors():
    with pytest.raises(DegenerateScale):
        rescale_global([cloud([(0.0, 0, 0)])])
    with pytest.raises(EmptyCloud):
        rescale_global([])
    with pytest.raises(DegenerateScale):
        apply_scale([cloud([(1.0, 0, 0)])], 0.0)


@settings(max_examples=50)
@given(st.lists(coords, min_size=2, max_size=4))
def test_rescale_preserves_distance_ratios_across_clouds(clouds_pts):
    clouds = [center(cloud(p + 1.0, f"c{i}")) for i, p in enumerate(clouds_pts)]
    if max(np.abs(c.points).max() for c in clouds) == 0:
        return
    scaled, _ = rescale_global(clouds)
    d = [np.linalg.norm(c.points[-1] - c.points[0]) for c in clouds]
    ds = [np.linalg.norm(c.points[-1] - c.points[0]) for c in scaled]
    for i in range(1, len(d)):
        if d[0] > 1e-6 and d[i] > 1e-6:
            assert ds[i] / ds[0] == pytest.approx(d[i] / d[0], rel=1e-12)


def test_normalize_unit_examples():
    out = normalize_unit(cloud([(0, 0, 0), (0, 0, 2)]))
    np.testing.assert_allclose(out.points, [(0, 0, 0), (0, 0, 1)])
    ball = cloud([(0, 0, 0), (0.6, 0, 0.8), (-0.6, 0, 0.8)])
    np.testing.assert_allclose(normalize_unit(ball).points, ball.points)
    with pytest.raises(DegenerateScale):
        normalize_unit(cloud([(3.0, 3.0, 3.0)]))


@given(coords)
def test_normalize_unit_max_norm_is_one(pts):
    c = cloud(pts)
    if np.ptp(pts, axis=0).max() < 1e-6:
        return
    out = normalize_unit(c)
    assert np.linalg.norm(out.points, axis=1).max() == pytest.approx(1.0)


# ---------------------------------------------------------------- farthest point sampling

def _fps_brute(p, n):
    """Straight transcription of the selection rule with explicit tie-breaks."""
    def key(i):
        return tuple(p[i])
    c = p.mean(axis=0)
    d0 = ((p - c) ** 2).sum(axis=1)
    best = max(d0)
    chosen = [min((i for i in range(len(p)) if d0[i] == best), key=key)]
    while len(chosen) < n:
        mind = np.array([min(((p[i] - p[j]) ** 2).sum() for j in chosen) for i in range(len(p))])
        best = mind.max()
        chosen.append(min((i for i in range(len(p)) if mind[i] == best), key=key))
    return chosen


def test_fps_unit_square_example():
    sq = cloud([(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 1, 0)])
    np.testing.assert_array_equal(fps(sq, 3).points, [(0, 0, 0), (1, 1, 0), (0, 1, 0)])


def test_fps_returns_everything_when_n_is_large():
    pts = [(3, 0, 0), (1, 0, 0), (2, 0, 0)]
    np.testing.assert_array_equal(fps(cloud(pts), 5).points, pts)
    with pytest.raises(InvalidCount):
        fps(cloud(pts), 0)


def test_fps_matches_brute_force_rule(rng):
    for _ in range(30):
        # integer grid coordinates produce plenty of exact distance ties
        p = rng.integers(0, 4, size=(25, 3)).astype(float)
        p = np.unique(p, axis=0)
        n = int(rng.integers(1, len(p)))
        np.testing.assert_array_equal(p[fps_indices(p, n)], p[_fps_brute(p, n)])


def test_fps_permutation_invariance_and_distinctness(rng):
    for _ in range(20):
        p = rng.normal(size=(60, 3))
        ref = fps(cloud(p), 16).points
        assert len(np.unique(ref, axis=0)) == 16
        for _ in range(3):
            shuffled = p[rng.permutation(60)]
            np.testing.assert_array_equal(fps(cloud(shuffled), 16).points, ref)


def test_fps_batch_matches_single(rng):
    b = rng.normal(size=(5, 40, 3))
    batch = fps_indices_batch(b, 10)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], fps_indices(b[i], 10))


# ---------------------------------------------------------------- k nearest neighbors

def test_knn_examples():
    line = cloud([(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    np.testing.assert_array_equal(knn(line, (0, 0, 0), 2), [0, 1])
    assert sorted(knn(line, (5, 5, 5), 3)) == [0, 1, 2]
    with pytest.raises(InvalidCount):
        knn(line, (0, 0, 0), 4)


def test_knn_distance_ties_break_by_index():
    pts = cloud([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, 0, 0)])
    np.testing.assert_array_equal(knn(pts, (0, 0, 0), 4), [3, 0, 1, 2])


def test_knn_batch_matches_single_and_handles_ties(rng):
    pts = rng.integers(0, 3, size=(4, 30, 3)).astype(float)
    queries = rng.integers(0, 3, size=(4, 6, 3)).astype(float)
    for k in (1, 5, 12, 30):
        got = knn_batch(pts, queries, k)
        for b in range(4):
            for q in range(6):
                np.testing.assert_array_equal(got[b, q], knn(cloud(pts[b]), queries[b, q], k))


# ---------------------------------------------------------------- filtering and resampling

def test_filter_min_points_is_strict():
    c1000 = cloud(np.zeros((1000, 3)), "a")
    c1001 = cloud(np.zeros((1001, 3)), "b")
    assert [c.id for c in filter_min_points([c1000, c1001], 1000)] == ["b"]
    assert len(filter_min_points([c1000, c1001], 0)) == 2
    once = filter_min_points([c1000, c1001], 1000)
    assert [c.id for c in filter_min_points(once, 1000)] == ["b"]


def test_resample_fixed_examples(rng):
    p = rng.normal(size=(7, 3))
    same = resample_fixed(cloud(p), 7, seed=3)
    np.testing.assert_array_equal(same.points, p)
    a = resample_fixed(cloud(p), 4, seed=9)
    b = resample_fixed(cloud(p), 4, seed=9)
    np.testing.assert_array_equal(a.points, b.points)
    assert len(np.unique(a.points, axis=0)) == 4

    three = cloud([(0, 0, 0), (1, 0, 0), (2, 0, 0)])
    up = resample_fixed(three, 5, seed=0)
    assert len(up.points) == 5
    np.testing.assert_array_equal(up.points[:3], three.points)
    assert all(any((row == q).all() for q in three.points) for row in up.points)
    with pytest.raises(InvalidCount):
        resample_fixed(three, 0, seed=0)


# ---------------------------------------------------------------- files

def test_xyz_csv_round_trip(tmp_path, rng):
    c = cloud(rng.normal(size=(10, 3)) * 1e5, "tree_7")
    path = tmp_path / "tree_7.csv"
    write_xyz_csv(c, path)
    assert path.read_text().splitlines()[0] == "x,y,z"
    back = read_xyz_csv(path)
    assert back.id == "tree_7"
    np.testing.assert_array_equal(back.points, c.points)


def test_xyz_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FormatError):
        read_xyz_csv(p)
    p.write_text("x,y,z\n")
    with pytest.raises(EmptyCloud):
        read_xyz_csv(p)
    p.write_text("x,y,z\n1,2,oops\n")
    with pytest.raises(FormatError):
        read_xyz_csv(p)


def test_manifest_round_trip_and_duplicate_ids(tmp_path):
    (tmp_path / "clouds").mkdir()
    write_xyz_csv(cloud([(0, 0, 0), (1, 1, 1)], "a"), tmp_path / "clouds" / "a.csv")
    write_xyz_csv(cloud([(0, 0, 1)], "b"), tmp_path / "clouds" / "b.csv")
    m = tmp_path / "manifest.csv"
    write_manifest([("a", "clouds/a.csv", 500000.5, 9e6, 7.25), ("b", "clouds/b.csv", None, None, None)], m)
    a, b = read_manifest(m)
    assert a.location == (500000.5, 9e6) and a.height == 7.25
    assert b.location is None and b.height is None

    write_manifest([("a", "clouds/a.csv", 1.0, 2.0, None), ("a", "clouds/b.csv", 1.0, 2.0, None)], m)
    with pytest.raises(FormatError):
        read_manifest(m)
