"""Parametric synthetic tree clouds with deliberately separable crown archetypes."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidCount
from .georef import CensusRecord, PlotFrame, write_census
from .pointcloud import PointCloud, write_manifest, write_xyz_csv
from .train import Item, LabeledDataset

CROWNS = ("umbrella", "cone", "sphere", "shrub")


@dataclass(frozen=True)
class Archetype:
    name: str
    crown: str
    height_range: tuple[float, float]
    crown_radius_range: tuple[float, float]
    trunk_fraction: float = 0.1
    jitter_sigma: float = 0.05

    def __post_init__(self):
        if self.crown not in CROWNS:
            raise ValueError(f"unknown crown shape {self.crown!r}; expected one of {CROWNS}")
        for lo, hi in (self.height_range, self.crown_radius_range):
            if not 0 < lo <= hi:
                raise ValueError(f"archetype {self.name!r}: ranges must be positive and ordered")
        if not 0 <= self.trunk_fraction <= 1:
            raise ValueError("trunk_fraction must lie in [0, 1]")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


DEFAULT_ARCHETYPES = (
    Archetype("umbrella", "umbrella", (6.0, 8.0), (2.5, 3.5), trunk_fraction=0.15),
    Archetype("shrub", "shrub", (1.0, 2.0), (1.0, 1.8), trunk_fraction=0.0),
    Archetype("cone", "cone", (10.0, 13.0), (1.5, 2.5), trunk_fraction=0.1),
)


def _unit_directions(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _crown(rng, crown: str, n: int, height: float, radius: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Crown surface points plus the crown center and the z where the trunk ends."""
    if crown == "umbrella":
        # flat disk at the top, with a slight downward droop toward the rim
        r = radius * np.sqrt(rng.uniform(size=n))
        t = rng.uniform(0, 2 * np.pi, size=n)
        z = height - 0.15 * radius * (r / radius) ** 2
        pts = np.column_stack([r * np.cos(t), r * np.sin(t), z])
        return pts, np.array([0.0, 0.0, height]), height
    if crown == "cone":
        base = height * 0.25
        # area-uniform on the lateral surface: radius shrinks linearly to the apex
        s = np.sqrt(rng.uniform(size=n))
        t = rng.uniform(0, 2 * np.pi, size=n)
        r = radius * s
        z = height - (height - base) * s
        pts = np.column_stack([r * np.cos(t), r * np.sin(t), z])
        return pts, np.array([0.0, 0.0, base]), base
    if crown == "sphere":
        c = np.array([0.0, 0.0, height - radius])
        return c + radius * _unit_directions(rng, n), c, max(height - 2 * radius, 0.0)
    # shrub: upper hemisphere sitting on the ground, flattened to the sampled height
    d = _unit_directions(rng, n)
    d[:, 2] = np.abs(d[:, 2])
    pts = d * np.array([radius, radius, height])
    return pts, np.zeros(3), 0.0


def generate_cloud(a: Archetype, n: int, seed, cloud_id: str | None = None,
                   location: tuple[float, float] | None = None) -> PointCloud:
    """Trunk points on a vertical segment and crown points on the archetype's surface.

    ``meta`` records the sampled height, crown radius, crown center and the
    number of leading trunk points (crown points follow them).
    """
    if n < 1:
        raise InvalidCount(f"generate_cloud needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    height = float(rng.uniform(*a.height_range))
    radius = float(rng.uniform(*a.crown_radius_range))
    n_trunk = int(round(a.trunk_fraction * n))
    crown, c_center, trunk_top = _crown(rng, a.crown, n - n_trunk, height, radius)
    trunk = np.column_stack([np.zeros(n_trunk), np.zeros(n_trunk),
                             rng.uniform(0.0, trunk_top, size=n_trunk)])
    pts = np.vstack([trunk, crown])
    if a.jitter_sigma > 0:
        pts = pts + rng.normal(scale=a.jitter_sigma, size=pts.shape)
    meta = {"archetype": a.name, "height_sample": height, "crown_radius": radius,
            "crown_center": c_center, "n_trunk": n_trunk}
    return PointCloud(cloud_id or a.name, pts, location, height, meta)


def merge_clouds(first: PointCloud, second: PointCloud, offset: tuple[float, float],
                 cloud_id: str | None = None) -> PointCloud:
    """Two trees segmented as one: the second shifted in the plane by ``offset``."""
    shifted = second.points + np.array([offset[0], offset[1], 0.0])
    pts = np.vstack([first.points, shifted])
    h = max(filter(None, (first.height, second.height)), default=None)
    return PointCloud(cloud_id or f"{first.id}+{second.id}", pts, first.location, h,
                      {"merged": (first.id, second.id)})


@dataclass
class SynthResult:
    dataset: LabeledDataset
    clouds: list[PointCloud]
    census: list[CensusRecord]
    frame: PlotFrame


def _item_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def generate_dataset(archetypes: Sequence[Archetype] = DEFAULT_ARCHETYPES, per_class: int = 100,
                     n_points=(800, 3000), seed: int = 0, spacing: float = 10.0,
                     origin: tuple[float, float] = (500000.0, 9000000.0),
                     shared_cells: int = 0) -> SynthResult:
    """Balanced labeled clouds on a planar grid, plus a census that locates them.

    ``n_points`` is a fixed count or an inclusive (lo, hi) range. Each item
    draws from its own seed derived from (seed, item index), so items do not
    depend on generation order. ``shared_cells`` moves that many items into
    the grid cell of an earlier item to produce ambiguous matches.
    """
    if per_class < 1:
        raise InvalidCount("per_class must be >= 1")
    total = per_class * len(archetypes)
    if not 0 <= shared_cells <= total // 2:
        raise InvalidCount("shared_cells must be between 0 and half the item count")
    side = int(np.ceil(np.sqrt(total)))
    frame = PlotFrame(origin[0] - spacing, origin[1] - spacing)
    items, clouds, census = [], [], []
    for idx in range(total):
        label, j = divmod(idx, per_class)
        a = archetypes[label]
        rng = np.random.default_rng(_item_seed(seed, idx))
        n = int(n_points) if np.isscalar(n_points) else int(rng.integers(n_points[0], n_points[1] + 1))
        cell = idx if idx < total - shared_cells else total - 1 - idx
        gx = origin[0] + spacing * (cell % side)
        gy = origin[1] + spacing * (cell // side)
        # both sides stay within 0.3 m of the grid point, so they round to the same cell
        cloud_xy = (gx + float(rng.uniform(-0.3, 0.3)), gy + float(rng.uniform(-0.3, 0.3)))
        tree_xy = (gx + float(rng.uniform(-0.3, 0.3)), gy + float(rng.uniform(-0.3, 0.3)))
        cid = f"{a.name}_{j:04d}"
        cloud = generate_cloud(a, n, rng.integers(2**63), cid, cloud_xy)
        clouds.append(cloud)
        items.append(Item(cid, cloud, label))
        census.append(CensusRecord(f"T{idx:05d}", a.name, tree_xy[0] - frame.post_x,
                                   tree_xy[1] - frame.post_y, dbh=round(10.0 * cloud.height, 1),
                                   alive=True, location=tree_xy))
    ds = LabeledDataset(items, [a.name for a in archetypes])
    return SynthResult(ds, clouds, census, frame)


def write_synth(result: SynthResult, out_dir) -> dict[str, Path]:
    """Write clouds as XYZ-CSV plus the manifest and census CSVs."""
    out = Path(out_dir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in result.clouds:
        rel = Path("clouds") / f"{c.id}.csv"
        write_xyz_csv(c, out / rel)
        rows.append((c.id, rel.as_posix(), c.location[0], c.location[1], c.height))
    manifest = out / "manifest.csv"
    census = out / "census.csv"
    write_manifest(rows, manifest)
    write_census(result.census, census)
    return {"manifest": manifest, "census": census}
