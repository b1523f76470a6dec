"""Point-cloud representation and geometric preprocessing.

Coordinates are kept as float64 ``(n, 3)`` arrays; conversion to single
precision happens only when clouds are batched into model tensors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateScale, EmptyCloud, FormatError, InvalidCount


@dataclass(frozen=True, eq=False)
class PointCloud:
    id: str
    points: np.ndarray
    location: tuple[float, float] | None = None
    height: float | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise FormatError(f"cloud {self.id!r}: points must be (n, 3), got {pts.shape}")
        if len(pts) == 0:
            raise EmptyCloud(f"cloud {self.id!r} has no points")
        if not np.isfinite(pts).all():
            raise FormatError(f"cloud {self.id!r} has non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)


def _check(cloud: PointCloud) -> np.ndarray:
    if cloud is None or len(cloud.points) == 0:
        raise EmptyCloud("empty cloud")
    return cloud.points


def centroid(cloud: PointCloud) -> np.ndarray:
    return _check(cloud).mean(axis=0)


def center(cloud: PointCloud) -> PointCloud:
    """Zero the x/y centroid and put the lowest point at z = 0."""
    pts = _check(cloud)
    c = pts.mean(axis=0)
    shift = np.array([c[0], c[1], pts[:, 2].min()])
    out = pts - shift
    # a second pass removes the rounding residue of the first subtraction
    out[:, :2] -= out[:, :2].mean(axis=0)
    out[:, 2] -= out[:, 2].min()
    return cloud.with_points(out)


def rescale_global(clouds: Sequence[PointCloud]) -> tuple[list[PointCloud], float]:
    """Divide every cloud by one shared scale so the largest |coordinate| is 1.

    Relative sizes across clouds survive, which keeps tree height informative.
    """
    if any(len(c.points) == 0 for c in clouds):
        raise EmptyCloud("empty cloud in rescale_global")
    if not clouds:
        raise EmptyCloud("no clouds to rescale")
    s = max(float(np.abs(c.points).max()) for c in clouds)
    if s == 0.0:
        raise DegenerateScale("all points lie at the origin")
    return [c.with_points(c.points / s) for c in clouds], s


def apply_scale(clouds: Iterable[PointCloud], scale: float) -> list[PointCloud]:
    """Reuse a scale fitted by ``rescale_global`` (e.g. on held-out clouds)."""
    if scale <= 0:
        raise DegenerateScale(f"scale must be positive, got {scale}")
    return [c.with_points(c.points / scale) for c in clouds]


def normalize_unit(cloud: PointCloud) -> PointCloud:
    centered = center(cloud)
    r = float(np.linalg.norm(centered.points, axis=1).max())
    if r == 0.0:
        raise DegenerateScale(f"cloud {cloud.id!r} collapses to a point")
    return centered.with_points(centered.points / r)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Permutation sorting points lexicographically by (x, y, z)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def fps_indices(points: np.ndarray, n: int) -> np.ndarray:
    """Farthest-point sampling on one ``(m, 3)`` array; returns selection order.

    Seed: the point farthest from the centroid. Ties anywhere resolve to the
    lexicographically smallest (x, y, z), so the selected coordinates do not
    depend on input order.
    """
    if n < 1:
        raise InvalidCount("fps needs n >= 1")
    m = len(points)
    if m == 0:
        raise EmptyCloud("fps on empty cloud")
    if n >= m:
        return np.arange(m)
    order = canonical_order(points)
    p = points[order]
    d_seed = ((p - p.mean(axis=0)) ** 2).sum(axis=1)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = int(np.argmax(d_seed))
    mind = ((p - p[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        np.minimum(mind, ((p - p[nxt]) ** 2).sum(axis=1), out=mind)
    return order[chosen]


def fps_indices_batch(points: np.ndarray, n: int) -> np.ndarray:
    """Vectorized ``fps_indices`` over a ``(B, m, 3)`` batch."""
    b, m, _ = points.shape
    if n < 1:
        raise InvalidCount("fps needs n >= 1")
    if n >= m:
        return np.broadcast_to(np.arange(m), (b, m)).copy()
    order = np.stack([canonical_order(pts) for pts in points])
    rows = np.arange(b)[:, None]
    p = points[rows, order]
    d_seed = ((p - p.mean(axis=1, keepdims=True)) ** 2).sum(axis=2)
    chosen = np.empty((b, n), dtype=np.int64)
    cur = np.argmax(d_seed, axis=1)
    chosen[:, 0] = cur
    mind = ((p - p[np.arange(b), cur][:, None]) ** 2).sum(axis=2)
    for i in range(1, n):
        cur = np.argmax(mind, axis=1)
        chosen[:, i] = cur
        np.minimum(mind, ((p - p[np.arange(b), cur][:, None]) ** 2).sum(axis=2), out=mind)
    return np.take_along_axis(order, chosen, axis=1)


def fps(cloud: PointCloud, n: int) -> PointCloud:
    pts = _check(cloud)
    return cloud.with_points(pts[fps_indices(pts, n)])


def knn(cloud: PointCloud, query, k: int) -> np.ndarray:
    """Indices of the k nearest points, ascending distance, ties by index."""
    pts = _check(cloud)
    if k < 1 or k > len(pts):
        raise InvalidCount(f"k={k} outside [1, {len(pts)}]")
    d = ((pts - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
    return np.argsort(d, kind="stable")[:k]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """``(B, q, k)`` neighbor indices of each query among ``points`` (B, m, 3)."""
    m = points.shape[1]
    if k < 1 or k > m:
        raise InvalidCount(f"k={k} outside [1, {m}]")
    d = ((queries[:, :, None, :] - points[:, None, :, :]) ** 2).sum(axis=-1)
    if k == m:
        return np.argsort(d, axis=-1, kind="stable")
    part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    dk = np.take_along_axis(d, part, axis=-1)
    crossing = (d <= dk.max(axis=-1, keepdims=True)).sum(axis=-1) > k
    if crossing.any():
        # a distance tie straddles the k-th slot; only a full stable sort is exact
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    key = np.lexsort((part, dk), axis=-1)
    return np.take_along_axis(part, key, axis=-1)


def filter_min_points(clouds: Iterable[PointCloud], min_points: int) -> list[PointCloud]:
    """Keep clouds with strictly more than ``min_points`` points."""
    return [c for c in clouds if len(c.points) > min_points]


def resample_fixed(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Return exactly n points: a seeded subset, or all points plus seeded repeats."""
    if n < 1:
        raise InvalidCount("resample_fixed needs n >= 1")
    pts = _check(cloud)
    rng = np.random.default_rng(seed)
    m = len(pts)
    if m >= n:
        idx = np.sort(rng.choice(m, size=n, replace=False))
    else:
        idx = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return cloud.with_points(pts[idx])


# ---------------------------------------------------------------- file formats

def read_xyz_csv(path, location=None, height=None) -> PointCloud:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["x", "y", "z"]:
                raise FormatError(f"{path}: expected header x,y,z, got {','.join(header)}")
            rows = [[float(v) for v in row] for row in reader if row]
    except StopIteration as exc:
        raise FormatError(f"{path}: empty file") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not rows:
        raise EmptyCloud(f"{path}: no points")
    return PointCloud(path.stem, np.array(rows), location, height)


def write_xyz_csv(cloud: PointCloud, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("x,y,z\n")
        for x, y, z in cloud.points.tolist():
            fh.write(f"{x!r},{y!r},{z!r}\n")


MANIFEST_HEADER = ["id", "path", "utm_x", "utm_y", "height"]


def _opt_float(s: str) -> float | None:
    s = s.strip()
    return float(s) if s else None


def read_manifest(path) -> list[PointCloud]:
    """Load every cloud listed in a dataset manifest CSV.

    Relative cloud paths resolve against the manifest's directory.
    """
    path = Path(path)
    clouds = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != MANIFEST_HEADER:
            raise FormatError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        for row in reader:
            try:
                ux, uy = _opt_float(row["utm_x"]), _opt_float(row["utm_y"])
                h = _opt_float(row["height"])
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}") from exc
            cpath = Path(row["path"])
            if not cpath.is_absolute():
                cpath = path.parent / cpath
            cloud = read_xyz_csv(cpath, None if ux is None or uy is None else (ux, uy), h)
            clouds.append(replace(cloud, id=row["id"]))
    ids = [c.id for c in clouds]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate cloud ids")
    return clouds


def write_manifest(rows: Iterable[tuple[str, str, float | None, float | None, float | None]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for cid, cpath, ux, uy, h in rows:
            w.writerow([cid, cpath, "" if ux is None else repr(float(ux)), "" if uy is None else repr(float(uy)),
                        "" if h is None else repr(float(h))])
