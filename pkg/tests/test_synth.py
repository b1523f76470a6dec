import numpy as np
import pytest

from pctrees.errors import InvalidCount
from pctrees.georef import match_by_rounding, read_census
from pctrees.pointcloud import read_manifest
from pctrees.synth import (DEFAULT_ARCHETYPES, Archetype, generate_cloud, generate_dataset, merge_clouds,
                           write_synth)


def exact(crown, **kw):
    """An archetype with fixed dimensions and no noise, so shapes can be checked exactly."""
    return Archetype(crown, crown, (8.0, 8.0), (2.0, 2.0), trunk_fraction=kw.get("trunk", 0.0), jitter_sigma=0.0)


def test_sphere_crown_lies_on_its_sphere():
    c = generate_cloud(exact("sphere"), 500, seed=1)
    center = c.meta["crown_center"]
    np.testing.assert_allclose(np.linalg.norm(c.points - center, axis=1), 2.0, atol=1e-12)
    assert c.points[:, 2].max() <= 8.0 + 1e-12


def test_cone_crown_radius_shrinks_linearly_to_apex():
    c = generate_cloud(exact("cone"), 500, seed=2)
    r = np.linalg.norm(c.points[:, :2], axis=1)
    base = 0.25 * 8.0
    np.testing.assert_allclose(r, 2.0 * (8.0 - c.points[:, 2]) / (8.0 - base), atol=1e-9)


def test_umbrella_is_wide_and_flat():
    c = generate_cloud(exact("umbrella"), 500, seed=3)
    assert np.linalg.norm(c.points[:, :2], axis=1).max() <= 2.0
    assert np.ptp(c.points[:, 2]) <= 0.15 * 2.0 + 1e-12


def test_trunk_points_come_first_and_stand_on_the_axis():
    c = generate_cloud(exact("umbrella", trunk=0.2), 100, seed=4)
    n = c.meta["n_trunk"]
    assert n == 20
    np.testing.assert_array_equal(c.points[:n, :2], 0.0)
    assert (c.points[:n, 2] >= 0).all() and (c.points[:n, 2] <= 8.0).all()


def test_generate_cloud_is_seeded_and_checks_count():
    a = DEFAULT_ARCHETYPES[0]
    np.testing.assert_array_equal(generate_cloud(a, 64, 9).points, generate_cloud(a, 64, 9).points)
    assert not np.array_equal(generate_cloud(a, 64, 9).points, generate_cloud(a, 64, 10).points)
    with pytest.raises(InvalidCount):
        generate_cloud(a, 0, 1)


def test_archetype_validation():
    with pytest.raises(ValueError):
        Archetype("x", "pyramid", (1, 2), (1, 2))
    with pytest.raises(ValueError):
        Archetype("x", "cone", (2, 1), (1, 2))


def test_archetypes_are_separable_by_height():
    res = generate_dataset(per_class=20, n_points=64, seed=0)
    heights = {name: [c.points[:, 2].max() for c in res.clouds if c.meta["archetype"] == name]
               for name in ("umbrella", "shrub", "cone")}
    assert max(heights["shrub"]) < min(heights["umbrella"]) < max(heights["umbrella"]) < min(heights["cone"])


def test_dataset_layout_and_determinism():
    a = generate_dataset(per_class=5, n_points=(40, 60), seed=7)
    b = generate_dataset(per_class=5, n_points=(40, 60), seed=7)
    assert len(a.dataset) == 15 and a.dataset.class_counts() == {0: 5, 1: 5, 2: 5}
    assert a.dataset.items[6].id == "shrub_0001"
    assert all(40 <= len(c) <= 60 for c in a.clouds)
    for x, y in zip(a.clouds, b.clouds):
        np.testing.assert_array_equal(x.points, y.points)


def test_items_do_not_depend_on_dataset_size():
    # per-item seeds come from (seed, index), so leading items ignore how many follow
    small = generate_dataset(per_class=3, n_points=32, seed=1)
    large = generate_dataset(per_class=5, n_points=32, seed=1)
    for i in range(3):
        np.testing.assert_array_equal(small.clouds[i].points, large.clouds[i].points)


def test_census_matches_every_cloud():
    res = generate_dataset(per_class=10, n_points=32, seed=2)
    r = match_by_rounding(res.clouds, res.census)
    assert r.match_rate == 1.0 and r.ambiguous_cells == 0
    species = {t.tag: t.species for t in res.census}
    labels = {it.id: res.dataset.class_names[it.label] for it in res.dataset.items}
    assert all(species[tag] == labels[cid] for cid, tag in r.pairs)


def test_shared_cells_produce_ambiguity():
    res = generate_dataset(per_class=4, n_points=16, seed=3, shared_cells=2)
    r = match_by_rounding(res.clouds, res.census)
    assert r.ambiguous_cells == 2 and len(r.pairs) == 12 - 4
    with pytest.raises(InvalidCount):
        generate_dataset(per_class=2, shared_cells=4)


def test_merge_clouds():
    a = generate_cloud(exact("sphere"), 10, 1, "a", (1.0, 2.0))
    b = generate_cloud(exact("sphere"), 5, 2, "b", (9.0, 9.0))
    m = merge_clouds(a, b, (3.0, 0.0))
    assert len(m) == 15 and m.id == "a+b" and m.location == (1.0, 2.0)
    np.testing.assert_allclose(m.points[10:, 0], b.points[:, 0] + 3.0)


def test_write_synth_round_trip(tmp_path):
    res = generate_dataset(per_class=2, n_points=20, seed=4)
    paths = write_synth(res, tmp_path)
    clouds = read_manifest(paths["manifest"])
    assert [c.id for c in clouds] == [c.id for c in res.clouds]
    np.testing.assert_array_equal(clouds[0].points, res.clouds[0].points)
    census = read_census(paths["census"], res.frame)
    assert match_by_rounding(clouds, census).match_rate == 1.0
