"""Six-view orthogonal rasterization of point clouds.

Pixel orientation per view (column axis, row axis). A ``-`` means the
pixel index is flipped, i.e. ``res - 1 - idx``. Rows grow downward, so side
views put the ground at the bottom.

    view    column   row    in-plane window
    top     +x       -y     x, y in [-e/2, e/2]
    bottom  +x       -y     same as top (no depth, so identical image)
    front   -x       -z     x in [-e/2, e/2], z in [0, e]
    back    +x       -z
    left    -y       -z
    right   +y       -z

front/back and left/right are therefore mirror images of each other.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCloud, FormatError, InvalidResolution, ShapeMismatch
from .pointcloud import PointCloud

VIEWS = ("top", "bottom", "front", "back", "left", "right")

# view -> ((axis, flip) for columns, (axis, flip) for rows)
_SIGNS = {
    "top": ((0, False), (1, True)),
    "bottom": ((0, False), (1, True)),
    "front": ((0, True), (2, True)),
    "back": ((0, False), (2, True)),
    "left": ((1, True), (2, True)),
    "right": ((1, False), (2, True)),
}

MODES = ("density", "occupancy")


@dataclass
class Raster:
    values: np.ndarray
    clipped: int = 0

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class ProjectionSet:
    views: list[Raster]

    def __post_init__(self):
        if len(self.views) != len(VIEWS):
            raise ShapeMismatch(f"a projection set has {len(VIEWS)} views, got {len(self.views)}")
        shapes = {v.values.shape for v in self.views}
        if len(shapes) != 1:
            raise ShapeMismatch(f"views differ in size: {sorted(shapes)}")

    @property
    def clipped(self) -> int:
        return sum(v.clipped for v in self.views)


def _pixel(coord: np.ndarray, lo: float, cell: float, res: int, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    idx = np.floor((coord - lo) / cell).astype(np.int64)
    outside = (idx < 0) | (idx >= res)
    idx = np.clip(idx, 0, res - 1)
    if flip:
        idx = res - 1 - idx
    return idx, outside


def project(cloud: PointCloud, view: str, res: int = 128, extent: float = 2.0,
            mode: str = "density") -> Raster:
    if view not in _SIGNS:
        raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if res < 1:
        raise InvalidResolution(f"res must be >= 1, got {res}")
    if not extent > 0:
        raise InvalidResolution(f"extent must be positive, got {extent}")
    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloud("cannot project an empty cloud")

    cell = extent / res
    (cax, cflip), (rax, rflip) = _SIGNS[view]
    lo = {0: -extent / 2, 1: -extent / 2, 2: 0.0}
    cols, cout = _pixel(pts[:, cax], lo[cax], cell, res, cflip)
    rows, rout = _pixel(pts[:, rax], lo[rax], cell, res, rflip)

    counts = np.zeros((res, res), dtype=np.float64)
    np.add.at(counts, (rows, cols), 1.0)
    if mode == "occupancy":
        values = (counts > 0).astype(np.float32)
    else:
        values = (counts / counts.max()).astype(np.float32)
    return Raster(values, int((cout | rout).sum()))


def project6(cloud: PointCloud, res: int = 128, extent: float = 2.0, mode: str = "density") -> ProjectionSet:
    return ProjectionSet([project(cloud, v, res, extent, mode) for v in VIEWS])


def stack_channels(ps: ProjectionSet) -> np.ndarray:
    return np.stack([v.values for v in ps.views])


def split_channels(arr: np.ndarray) -> ProjectionSet:
    if arr.ndim != 3 or arr.shape[0] != len(VIEWS):
        raise ShapeMismatch(f"expected ({len(VIEWS)}, res, res), got {arr.shape}")
    return ProjectionSet([Raster(np.array(a, dtype=np.float32)) for a in arr])


# ---------------------------------------------------------------- file formats

_MAGIC = b"PCTR"
_HEADER = struct.Struct("<4sII12x")  # magic, views, res, reserved to 24 bytes


def write_pgm(raster: Raster, path) -> None:
    v = np.clip(raster.values, 0.0, 1.0)
    data = np.round(255.0 * v).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_projection_binary(ps: ProjectionSet | np.ndarray, path) -> None:
    arr = stack_channels(ps) if isinstance(ps, ProjectionSet) else np.asarray(ps)
    views, h, w = arr.shape
    if h != w:
        raise ShapeMismatch(f"rasters must be square, got {h}x{w}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, views, h))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_projection_binary(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated raster file")
    magic, views, res = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * views * res * res
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(views, res, res).astype(np.float32)
