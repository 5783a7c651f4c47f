"""Georeferenced coverage grid: projection, sample ingestion and file formats.

Coordinates are flattened around the grid origin with a local equirectangular
projection. Row 0 is the southernmost row and column 0 the westernmost column;
each element owns the half-open box ``[south, north) x [west, east)``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

METERS_PER_DEGREE = 111320.0
RSRP_MIN_DBM = -160.0
RSRP_MAX_DBM = -20.0
DEFAULT_CELL_SIZE_M = 50.0

SAMPLES_HEADER = ("pci", "rsrp_dbm", "lat", "lon", "timestamp_ms", "source", "ue_token")


class ConfigError(ValueError):
    """Invalid grid or pipeline configuration."""


class ParseError(ValueError):
    """Malformed input file; carries the 1-based line and column."""

    def __init__(self, line: int, column: str, reason: str):
        self.line = line
        self.column = column
        self.reason = reason
        super().__init__(f"line {line}, column {column!r}: {reason}")


class GeoPoint(NamedTuple):
    lat: float
    lon: float


class GridCoord(NamedTuple):
    row: int
    col: int


class Source(str, enum.Enum):
    MDT = "MDT"
    MR = "MR"
    DT = "DT"
    SYNTH = "SYNTH"


@dataclass(frozen=True)
class GridSpec:
    origin: GeoPoint
    rows: int
    cols: int
    cell_size_m: float = DEFAULT_CELL_SIZE_M

    def __post_init__(self):
        object.__setattr__(self, "origin", GeoPoint(float(self.origin[0]), float(self.origin[1])))
        self.validate()

    def validate(self) -> None:
        if not (isinstance(self.rows, (int, np.integer)) and self.rows >= 1):
            raise ConfigError(f"rows must be an integer >= 1, got {self.rows!r}")
        if not (isinstance(self.cols, (int, np.integer)) and self.cols >= 1):
            raise ConfigError(f"cols must be an integer >= 1, got {self.cols!r}")
        if not (math.isfinite(self.cell_size_m) and self.cell_size_m > 0):
            raise ConfigError(f"cell_size_m must be > 0, got {self.cell_size_m!r}")
        lat, lon = self.origin
        if not (-90.0 < lat < 90.0 and -180.0 <= lon <= 180.0):
            raise ConfigError(f"origin out of range: {self.origin}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def width_m(self) -> float:
        return self.cols * self.cell_size_m

    @property
    def height_m(self) -> float:
        return self.rows * self.cell_size_m

    @property
    def _east_scale(self) -> float:
        return METERS_PER_DEGREE * math.cos(math.radians(self.origin.lat))

    def to_meters(self, p: GeoPoint) -> Tuple[float, float]:
        """Return ``(east, north)`` offsets of ``p`` from the origin."""
        east = (p[1] - self.origin.lon) * self._east_scale
        north = (p[0] - self.origin.lat) * METERS_PER_DEGREE
        return east, north

    def to_geo(self, east: float, north: float) -> GeoPoint:
        return GeoPoint(self.origin.lat + north / METERS_PER_DEGREE,
                        self.origin.lon + east / self._east_scale)

    def locate_m(self, east: float, north: float) -> Optional[GridCoord]:
        col = math.floor(east / self.cell_size_m)
        row = math.floor(north / self.cell_size_m)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return GridCoord(row, col)
        return None

    def project(self, p: GeoPoint) -> Optional[GridCoord]:
        return self.locate_m(*self.to_meters(p))

    def center_m(self, coord: GridCoord) -> Tuple[float, float]:
        return ((coord[1] + 0.5) * self.cell_size_m, (coord[0] + 0.5) * self.cell_size_m)

    def center_of(self, coord: GridCoord) -> GeoPoint:
        return self.to_geo(*self.center_m(coord))

    def centers_m(self) -> Tuple[np.ndarray, np.ndarray]:
        """Element-center ``(east, north)`` arrays of shape ``(rows, cols)``."""
        cols = (np.arange(self.cols) + 0.5) * self.cell_size_m
        rows = (np.arange(self.rows) + 0.5) * self.cell_size_m
        east, north = np.meshgrid(cols, rows)
        return east, north

    def contains(self, coord: GridCoord) -> bool:
        return 0 <= coord[0] < self.rows and 0 <= coord[1] < self.cols

    def to_dict(self) -> dict:
        return {"origin": {"lat": self.origin.lat, "lon": self.origin.lon},
                "cell_size_m": self.cell_size_m, "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        try:
            origin = GeoPoint(float(d["origin"]["lat"]), float(d["origin"]["lon"]))
            return cls(origin=origin, rows=int(d["rows"]), cols=int(d["cols"]),
                       cell_size_m=float(d.get("cell_size_m", DEFAULT_CELL_SIZE_M)))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad grid spec: {exc}") from exc


def project(spec: GridSpec, p: GeoPoint) -> Optional[GridCoord]:
    return spec.project(p)


@dataclass(frozen=True)
class RawSample:
    pci: int
    rsrp_dbm: float
    position: Optional[GeoPoint]
    timestamp_ms: int
    source: Source
    ue_token: str = ""

    def __post_init__(self):
        if not isinstance(self.pci, (int, np.integer)) or isinstance(self.pci, bool) or self.pci < 0:
            raise ValueError(f"pci must be a non-negative integer, got {self.pci!r}")
        if not (RSRP_MIN_DBM <= self.rsrp_dbm <= RSRP_MAX_DBM):
            raise ValueError(f"rsrp_dbm {self.rsrp_dbm!r} outside [{RSRP_MIN_DBM}, {RSRP_MAX_DBM}]")
        source = Source(self.source)
        object.__setattr__(self, "source", source)
        if self.position is None and source is not Source.MR:
            raise ValueError(f"{source.value} samples require a position")
        if self.position is not None:
            object.__setattr__(self, "position", GeoPoint(float(self.position[0]), float(self.position[1])))


@dataclass(frozen=True)
class CellStat:
    mean_rsrp_dbm: float
    count: int


@dataclass(frozen=True)
class CoverageGrid:
    """Per-element, per-PCI aggregated RSRP. Treat as immutable."""

    spec: GridSpec
    cells: Dict[GridCoord, Dict[int, CellStat]] = field(default_factory=dict)
    skipped: int = 0

    @property
    def pcis(self) -> List[int]:
        return sorted({pci for stats in self.cells.values() for pci in stats})

    @property
    def total_count(self) -> int:
        return sum(s.count for stats in self.cells.values() for s in stats.values())

    def __len__(self) -> int:
        return len(self.cells)


def _aggregate(spec: GridSpec, groups: Dict[Tuple[GridCoord, int], List[float]], skipped: int) -> CoverageGrid:
    cells: Dict[GridCoord, Dict[int, CellStat]] = {}
    for (coord, pci) in sorted(groups):
        values = groups[(coord, pci)]
        # fsum is exactly rounded, so the mean does not depend on sample order
        cells.setdefault(coord, {})[pci] = CellStat(math.fsum(values) / len(values), len(values))
    return CoverageGrid(spec, cells, skipped)


def ingest(spec: GridSpec, samples: Iterable[RawSample]) -> CoverageGrid:
    """Bin positioned samples into the grid.

    Unpositioned samples and samples falling outside the grid extent are
    skipped; ``CoverageGrid.skipped`` holds how many.
    """
    if not isinstance(spec, GridSpec):
        raise ConfigError("ingest needs a GridSpec")
    spec.validate()
    groups: Dict[Tuple[GridCoord, int], List[float]] = {}
    skipped = 0
    for s in samples:
        coord = spec.project(s.position) if s.position is not None else None
        if coord is None:
            skipped += 1
            continue
        groups.setdefault((coord, int(s.pci)), []).append(float(s.rsrp_dbm))
    return _aggregate(spec, groups, skipped)


def merge(grids: Sequence[CoverageGrid]) -> CoverageGrid:
    """Count-weighted merge of grids ingested from disjoint sample shards."""
    if not grids:
        raise ConfigError("nothing to merge")
    spec = grids[0].spec
    acc: Dict[Tuple[GridCoord, int], List[float]] = {}
    counts: Dict[Tuple[GridCoord, int], int] = {}
    for g in grids:
        if g.spec != spec:
            raise ConfigError("cannot merge grids with different specs")
        for coord, stats in g.cells.items():
            for pci, st in stats.items():
                acc.setdefault((coord, pci), []).append(st.mean_rsrp_dbm * st.count)
                counts[(coord, pci)] = counts.get((coord, pci), 0) + st.count
    cells: Dict[GridCoord, Dict[int, CellStat]] = {}
    for key in sorted(acc):
        coord, pci = key
        cells.setdefault(coord, {})[pci] = CellStat(math.fsum(acc[key]) / counts[key], counts[key])
    return CoverageGrid(spec, cells, sum(g.skipped for g in grids))


def field_of(grid: CoverageGrid, pci: int) -> Dict[GridCoord, float]:
    """Sparse field of one PCI: element -> mean RSRP, only where it was measured."""
    return {coord: stats[pci].mean_rsrp_dbm for coord, stats in grid.cells.items() if pci in stats}


def field_to_array(field: Mapping[GridCoord, float], spec: GridSpec) -> np.ndarray:
    """Dense ``(rows, cols)`` array with NaN at unpopulated elements."""
    out = np.full(spec.shape, np.nan)
    for (r, c), v in field.items():
        out[r, c] = v
    return out


# --- samples CSV -----------------------------------------------------------

def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_samples_csv(samples: Iterable[RawSample], path_or_file) -> None:
    text = dump_samples_csv(samples)
    if hasattr(path_or_file, "write"):
        path_or_file.write(text)
    else:
        with open(path_or_file, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def dump_samples_csv(samples: Iterable[RawSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLES_HEADER)
    for s in samples:
        lat = lon = ""
        if s.position is not None:
            lat, lon = _fmt_float(s.position.lat), _fmt_float(s.position.lon)
        w.writerow([int(s.pci), _fmt_float(s.rsrp_dbm), lat, lon, int(s.timestamp_ms),
                    Source(s.source).value, s.ue_token])
    return buf.getvalue()


def _parse_row(row: List[str], line: int) -> RawSample:
    if len(row) != len(SAMPLES_HEADER):
        raise ParseError(line, "*", f"expected {len(SAMPLES_HEADER)} fields, got {len(row)}")
    pci_s, rsrp_s, lat_s, lon_s, ts_s, src_s, token = row

    def num(text, col, conv):
        try:
            return conv(text)
        except ValueError:
            raise ParseError(line, col, f"not a number: {text!r}") from None

    pci = num(pci_s, "pci", int)
    if pci < 0:
        raise ParseError(line, "pci", "pci must be >= 0")
    rsrp = num(rsrp_s, "rsrp_dbm", float)
    if not (RSRP_MIN_DBM <= rsrp <= RSRP_MAX_DBM):
        raise ParseError(line, "rsrp_dbm", f"{rsrp} outside [{RSRP_MIN_DBM}, {RSRP_MAX_DBM}]")
    ts = num(ts_s, "timestamp_ms", int)
    try:
        source = Source(src_s)
    except ValueError:
        raise ParseError(line, "source", f"unknown source {src_s!r}") from None
    if (lat_s == "") != (lon_s == ""):
        raise ParseError(line, "lat" if lat_s == "" else "lon", "lat and lon must both be set or both empty")
    position = None
    if lat_s != "":
        position = GeoPoint(num(lat_s, "lat", float), num(lon_s, "lon", float))
    elif source is not Source.MR:
        raise ParseError(line, "lat", f"{source.value} rows require a position")
    return RawSample(pci, rsrp, position, ts, source, token)


def parse_samples_csv(text: str) -> List[RawSample]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(1, "*", "empty file, header expected") from None
    if tuple(header) != SAMPLES_HEADER:
        raise ParseError(1, "*", f"bad header {header!r}")
    return [_parse_row(row, reader.line_num) for row in reader if row]


def read_samples_csv(path_or_file) -> List[RawSample]:
    if hasattr(path_or_file, "read"):
        return parse_samples_csv(path_or_file.read())
    with open(path_or_file, "r", encoding="utf-8", newline="") as fh:
        return parse_samples_csv(fh.read())


# --- grid JSON ---------------------------------------------------------------

GRID_FORMAT_VERSION = 1


def grid_to_dict(grid: CoverageGrid) -> dict:
    elements = [
        {"row": coord.row, "col": coord.col, "pci": pci,
         "mean_rsrp_dbm": st.mean_rsrp_dbm, "count": st.count}
        for coord in sorted(grid.cells) for pci, st in sorted(grid.cells[coord].items())
    ]
    return {"version": GRID_FORMAT_VERSION, "spec": grid.spec.to_dict(), "elements": elements}


def grid_from_dict(d: Mapping) -> CoverageGrid:
    if d.get("version") != GRID_FORMAT_VERSION:
        raise ParseError(1, "version", f"unsupported grid version {d.get('version')!r}")
    spec = GridSpec.from_dict(d["spec"])
    cells: Dict[GridCoord, Dict[int, CellStat]] = {}
    for i, e in enumerate(d["elements"]):
        coord = GridCoord(int(e["row"]), int(e["col"]))
        if not spec.contains(coord):
            raise ParseError(i + 1, "row/col", f"element {tuple(coord)} outside grid")
        if int(e["count"]) < 1:
            raise ParseError(i + 1, "count", "count must be >= 1")
        cells.setdefault(coord, {})[int(e["pci"])] = CellStat(float(e["mean_rsrp_dbm"]), int(e["count"]))
    return CoverageGrid(spec, cells)


def write_grid_json(grid: CoverageGrid, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(grid_to_dict(grid), fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_grid_json(path) -> CoverageGrid:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.lineno, str(exc.colno), exc.msg) from None
    return grid_from_dict(d)
