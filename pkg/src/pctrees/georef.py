"""Census-to-LiDAR label matching on a rounded planar grid."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, InsufficientSpecies, MissingLocation

OTHER = "other"


@dataclass(frozen=True)
class CensusRecord:
    tag: str
    species: str
    east_offset: float
    north_offset: float
    dbh: float | None = None
    alive: bool = True
    location: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.species:
            raise FormatError(f"census record {self.tag!r} has no species")
        for v in (self.east_offset, self.north_offset):
            if not math.isfinite(v) or v < 0:
                raise FormatError(f"census record {self.tag!r}: offsets must be finite and >= 0")


@dataclass(frozen=True)
class PlotFrame:
    post_x: float
    post_y: float


@dataclass
class MatchResult:
    pairs: list[tuple[str, str]]
    ambiguous_cells: int
    unmatched_clouds: int
    unmatched_records: int
    match_rate: float


@dataclass
class ClassDictionary:
    class_names: list[str]
    species_to_index: dict[str, int] = field(default_factory=dict)

    @property
    def other_index(self) -> int:
        return len(self.class_names) - 1

    def __len__(self) -> int:
        return len(self.class_names)

    def index(self, species: str) -> int:
        return self.species_to_index.get(species, self.other_index)


def to_shared_frame(record: CensusRecord, frame: PlotFrame) -> tuple[float, float]:
    return (frame.post_x + record.east_offset, frame.post_y + record.north_offset)


def locate(records: Iterable[CensusRecord], frame: PlotFrame) -> list[CensusRecord]:
    return [replace(r, location=to_shared_frame(r, frame)) for r in records]


def round_half_away(v: float) -> int:
    a = abs(v)
    f = math.floor(a)
    # compare the fractional part directly; a + 0.5 can round up in float
    r = f + 1 if a - f >= 0.5 else f
    return int(-r if v < 0 else r)


def cell_of(xy: tuple[float, float], cell_size: float = 1.0) -> tuple[int, int]:
    """Grid cell of a planar location; cell_size 1 is rounding to whole meters."""
    return (round_half_away(xy[0] / cell_size), round_half_away(xy[1] / cell_size))


def match_by_rounding(clouds: Sequence, records: Sequence[CensusRecord],
                      cell_size: float = 1.0) -> MatchResult:
    """Pair clouds with census records that round to the same grid cell.

    A pair is produced only for cells holding exactly one cloud and exactly
    one record; crowded cells are counted as ambiguous and dropped.
    """
    cloud_cells: dict[tuple[int, int], list[str]] = defaultdict(list)
    record_cells: dict[tuple[int, int], list[str]] = defaultdict(list)
    for c in clouds:
        if c.location is None:
            raise MissingLocation(f"cloud {c.id!r} has no planar location")
        cloud_cells[cell_of(c.location, cell_size)].append(c.id)
    for r in records:
        if r.location is None:
            raise MissingLocation(f"census record {r.tag!r} has no planar location")
        record_cells[cell_of(r.location, cell_size)].append(r.tag)

    pairs = []
    ambiguous = 0
    for cell in sorted(set(cloud_cells) & set(record_cells)):
        cs, rs = cloud_cells[cell], record_cells[cell]
        if len(cs) == 1 and len(rs) == 1:
            pairs.append((cs[0], rs[0]))
        else:
            ambiguous += 1
    # crowded cells with no partner on the other side are ambiguous too
    ambiguous += sum(1 for cell, cs in cloud_cells.items() if len(cs) > 1 and cell not in record_cells)
    ambiguous += sum(1 for cell, rs in record_cells.items() if len(rs) > 1 and cell not in cloud_cells)

    n_clouds = len(clouds)
    return MatchResult(
        pairs=pairs,
        ambiguous_cells=ambiguous,
        unmatched_clouds=n_clouds - len(pairs),
        unmatched_records=len(records) - len(pairs),
        match_rate=len(pairs) / n_clouds if n_clouds else 0.0,
    )


def group_species(species: Iterable[str], top_k: int = 5) -> ClassDictionary:
    """Top-k species by count become classes 0..k-1; the rest fold into "other".

    ``species`` holds one entry per matched image. Count ties break
    alphabetically.
    """
    if top_k < 1:
        raise InsufficientSpecies("top_k must be >= 1")
    counts = Counter(species)
    if len(counts) < top_k:
        raise InsufficientSpecies(f"{len(counts)} distinct species, need {top_k}")
    ranked = sorted(counts, key=lambda s: (-counts[s], s))[:top_k]
    return ClassDictionary(ranked + [OTHER], {s: i for i, s in enumerate(ranked)})


# ---------------------------------------------------------------- file formats

CENSUS_HEADER = ["tag", "species", "east_offset", "north_offset", "dbh", "alive"]
MATCH_HEADER = ["cloud_id", "census_tag", "class_index", "class_name"]


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "t", "yes", "y", "alive", "a"):
        return True
    if v in ("0", "false", "f", "no", "n", "dead", "d"):
        return False
    raise FormatError(f"cannot read alive flag {s!r}")


def read_census(path, frame: PlotFrame | None = None, include_dead: bool = False) -> list[CensusRecord]:
    """Read a census CSV; dead stems are dropped unless ``include_dead``."""
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != CENSUS_HEADER:
            raise FormatError(f"{path}: census header must be {','.join(CENSUS_HEADER)}")
        for line, row in enumerate(reader, start=2):
            try:
                dbh = row["dbh"].strip()
                rec = CensusRecord(
                    tag=row["tag"],
                    species=row["species"].strip(),
                    east_offset=float(row["east_offset"]),
                    north_offset=float(row["north_offset"]),
                    dbh=float(dbh) if dbh else None,
                    alive=_parse_bool(row["alive"]),
                )
            except (ValueError, AttributeError) as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
            if rec.alive or include_dead:
                out.append(rec)
    if frame is not None:
        out = locate(out, frame)
    return out


def write_census(records: Iterable[CensusRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CENSUS_HEADER)
        for r in records:
            w.writerow([r.tag, r.species, repr(float(r.east_offset)), repr(float(r.north_offset)),
                        "" if r.dbh is None else repr(float(r.dbh)), "1" if r.alive else "0"])


def write_match_report(pairs: Sequence[tuple[str, str]], species_of: dict[str, str],
                       classes: ClassDictionary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MATCH_HEADER)
        for cloud_id, tag in pairs:
            k = classes.index(species_of[tag])
            w.writerow([cloud_id, tag, k, classes.class_names[k]])


def read_match_report(path) -> list[tuple[str, str, int, str]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != MATCH_HEADER:
            raise FormatError(f"{path}: match report header must be {','.join(MATCH_HEADER)}")
        try:
            return [(r["cloud_id"], r["census_tag"], int(r["class_index"]), r["class_name"]) for r in reader]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
