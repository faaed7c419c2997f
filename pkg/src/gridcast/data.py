"""Dataset model and ingestion: road graph, region grid, aligned hourly series.

File formats (all CSV files are UTF-8 with a header row; empty fields mean
missing):

* ``nodes.csv``       road_id, lat, lon
* ``edges.csv``       src, dst, distance_m (directed)
* ``speeds.csv``      timestamp plus one column per road_id (km/h)
* ``population.csv``  timestamp plus one column per row-major cell index
* ``poi.csv``         cell_index plus ten POI category counts
* ``satfeat.csv``     cell_index, f0..f{F-1} (optional)
* ``grid.json``       n_h, n_w, cell_size_m, origin_lat, origin_lon

Row-major cell index ``i * n_w + j`` walks the grid west-to-east then
south-to-north; the origin is the south-west corner of cell (0, 0).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError

POI_CATEGORIES = (
    "shopping", "food", "cafe", "beauty", "work", "hospital", "school",
    "art_entertainment", "lodging", "nightlife",
)

EARTH_RADIUS_M = 6_371_000.0
_DEG_PER_M_LAT = 180.0 / (math.pi * EARTH_RADIUS_M)


def haversine_m(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; accepts broadcasting arrays of degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class RoadGraph:
    """Directed road graph; nodes are ordered by sorted road_id."""

    road_ids: tuple
    lat: np.ndarray            # (N_X,)
    lon: np.ndarray            # (N_X,)
    edge_src: np.ndarray       # (E,) int indices
    edge_dst: np.ndarray       # (E,)
    edge_dist: np.ndarray      # (E,) meters

    @property
    def n_x(self):
        return len(self.road_ids)

    @staticmethod
    def from_rows(node_rows, edge_rows):
        """node_rows: (road_id, lat, lon); edge_rows: (src_id, dst_id, dist_m)."""
        ids = [r[0] for r in node_rows]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicated road_id in nodes: {dupes}")
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        road_ids = tuple(ids[i] for i in order)
        index = {rid: i for i, rid in enumerate(road_ids)}
        lat = np.array([float(node_rows[i][1]) for i in order])
        lon = np.array([float(node_rows[i][2]) for i in order])
        src, dst, dist = [], [], []
        for s, d, w in edge_rows:
            if s not in index or d not in index:
                raise DataError(f"edge references unknown road_id: {s!r} -> {d!r}")
            w = float(w)
            if not (w > 0.0) or not math.isfinite(w):
                raise DataError(f"edge distance must be positive and finite, got {w}")
            src.append(index[s])
            dst.append(index[d])
            dist.append(w)
        return RoadGraph(road_ids, lat, lon,
                         np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp),
                         np.array(dist))


@dataclass(frozen=True)
class RegionGrid:
    """Uniform grid of square cells with per-cell POI counts and optional features."""

    n_h: int
    n_w: int
    cell_size_m: float
    origin_lat: float
    origin_lon: float
    poi: np.ndarray                 # (N_Z, 10) counts
    sat: np.ndarray | None = None   # (N_Z, F) or None

    @property
    def n_z(self):
        return self.n_h * self.n_w

    def cell_centers(self):
        """(lat, lon) arrays of shape (N_Z,) in row-major cell order."""
        deg_lon = _DEG_PER_M_LAT / math.cos(math.radians(self.origin_lat))
        lat_rows = self.origin_lat + (np.arange(self.n_h) + 0.5) * self.cell_size_m * _DEG_PER_M_LAT
        lon_cols = self.origin_lon + (np.arange(self.n_w) + 0.5) * self.cell_size_m * deg_lon
        return np.repeat(lat_rows, self.n_w), np.tile(lon_cols, self.n_h)


@dataclass
class NormStats:
    """Per-series z-score statistics fitted on the training partition."""

    x_mean: np.ndarray
    x_std: np.ndarray
    z_mean: np.ndarray
    z_std: np.ndarray

    def denorm_x(self, values):
        return values * self.x_std + self.x_mean

    def to_dict(self):
        return {
            "x_mean": self.x_mean.tolist(), "x_std": self.x_std.tolist(),
            "z_mean": self.z_mean.tolist(), "z_std": self.z_std.tolist(),
        }

    @staticmethod
    def from_dict(d):
        return NormStats(*(np.array(d[k], dtype=np.float64)
                           for k in ("x_mean", "x_std", "z_mean", "z_std")))


@dataclass
class TrafficDataset:
    """Aligned hourly road-speed and cell-population series."""

    timestamps: tuple
    x: np.ndarray            # (T, N_X) raw km/h; NaN until fill_missing
    z: np.ndarray            # (T, N_Z) raw population
    x_missing: np.ndarray    # (T, N_X) bool, True where the file had no value
    z_missing: np.ndarray
    train_end: int = 0
    val_end: int = 0
    norm: NormStats | None = None
    x_norm: np.ndarray | None = None
    z_norm: np.ndarray | None = None

    @property
    def n_steps(self):
        return len(self.timestamps)

    def partition_bounds(self, partition):
        table = {
            "train": (0, self.train_end),
            "val": (self.train_end, self.val_end),
            "test": (self.val_end, self.n_steps),
        }
        if partition not in table:
            raise DataError(f"unknown partition {partition!r}")
        if self.train_end == 0:
            raise DataError("dataset has not been split yet")
        return table[partition]


@dataclass(frozen=True)
class Sample:
    """One forecasting window: P history steps and Q target steps."""

    start: int
    x_hist: np.ndarray       # (P, N_X) normalized
    z_hist: np.ndarray       # (P, N_Z) normalized
    y: np.ndarray            # (Q, N_X) normalized
    y_raw: np.ndarray        # (Q, N_X) km/h
    y_missing: np.ndarray    # (Q, N_X) bool, True where the target was imputed
    times: tuple             # P+Q datetimes


def _parse_timestamp(text, where):
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"{where}: bad timestamp {text!r}") from None


def _read_series_csv(path, expect_columns, what):
    """Read a timestamp-indexed wide CSV; empty fields become NaN+mask."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{what}: empty file {path}") from None
        if not header or header[0] != "timestamp":
            raise DataError(f"{what}: first column must be 'timestamp'")
        cols = header[1:]
        known = set(expect_columns)
        unknown = [c for c in cols if c not in known]
        if unknown:
            raise DataError(f"{what}: unknown column(s) {unknown[:5]}")
        if set(cols) != known:
            missing = sorted(known - set(cols))
            raise DataError(f"{what}: missing column(s) {missing[:5]}")
        order = [cols.index(c) for c in expect_columns]
        stamps, rows, masks = [], [], []
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{what} line {ln}: expected {len(header)} fields, got {len(row)}")
            stamps.append(_parse_timestamp(row[0], f"{what} line {ln}"))
            vals = np.empty(len(cols))
            miss = np.zeros(len(cols), dtype=bool)
            for k, j in enumerate(order):
                cell = row[1 + j].strip()
                if cell == "":
                    vals[k] = np.nan
                    miss[k] = True
                else:
                    try:
                        vals[k] = float(cell)
                    except ValueError:
                        raise DataError(f"{what} line {ln}: bad value {cell!r}") from None
                    if not math.isfinite(vals[k]):
                        raise DataError(f"{what} line {ln}: non-finite value {cell!r}")
            rows.append(vals)
            masks.append(miss)
    if not rows:
        raise DataError(f"{what}: no data rows")
    return stamps, np.array(rows), np.array(masks)


def _check_hourly(stamps, what):
    hour = timedelta(hours=1)
    for a, b in zip(stamps, stamps[1:]):
        if b <= a:
            raise DataError(f"{what}: timestamps not strictly increasing at {b.isoformat()}")
        if b - a > hour:
            raise DataError(f"{what}: gap larger than one hour before {b.isoformat()}")


def load_dataset(data_dir):
    """Load a dataset directory; returns (TrafficDataset, RoadGraph, RegionGrid).

    The returned dataset still contains NaN at missing entries; run
    ``prepare_dataset`` (or fill/split/normalize individually) before modeling.
    """
    def p(name):
        path = os.path.join(data_dir, name)
        if not os.path.exists(path):
            raise DataError(f"missing required file: {path}")
        return path

    with open(p("grid.json"), encoding="utf-8") as fh:
        try:
            gdoc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"grid.json: {e}") from None
    for key in ("n_h", "n_w", "cell_size_m", "origin_lat", "origin_lon"):
        if key not in gdoc:
            raise DataError(f"grid.json missing key {key!r}")
    n_h, n_w = int(gdoc["n_h"]), int(gdoc["n_w"])
    if n_h < 1 or n_w < 1:
        raise DataError("grid.json: n_h and n_w must be positive")
    n_z = n_h * n_w

    node_rows = _read_table(p("nodes.csv"), ("road_id", "lat", "lon"))
    edge_rows = _read_table(p("edges.csv"), ("src", "dst", "distance_m"))
    graph = RoadGraph.from_rows(node_rows, edge_rows)

    poi = _read_indexed(p("poi.csv"), ("cell_index",) + POI_CATEGORIES, n_z, "poi.csv")
    if (poi < 0).any():
        raise DataError("poi.csv: counts must be non-negative")
    sat = None
    sat_path = os.path.join(data_dir, "satfeat.csv")
    if os.path.exists(sat_path):
        with open(sat_path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        feat_cols = tuple(header[1:])
        expect = tuple(f"f{i}" for i in range(len(feat_cols)))
        if header[0] != "cell_index" or feat_cols != expect:
            raise DataError("satfeat.csv: header must be cell_index,f0..f{F-1}")
        sat = _read_indexed(sat_path, ("cell_index",) + feat_cols, n_z, "satfeat.csv")
    grid = RegionGrid(n_h, n_w, float(gdoc["cell_size_m"]),
                      float(gdoc["origin_lat"]), float(gdoc["origin_lon"]), poi, sat)

    stamps_x, x, x_miss = _read_series_csv(p("speeds.csv"), graph.road_ids, "speeds.csv")
    cell_cols = tuple(str(i) for i in range(n_z))
    stamps_z, z, z_miss = _read_series_csv(p("population.csv"), cell_cols, "population.csv")
    if stamps_x != stamps_z:
        raise DataError("speeds.csv and population.csv timestamps differ")
    _check_hourly(stamps_x, "speeds.csv")
    dataset = TrafficDataset(tuple(stamps_x), x, z, x_miss, z_miss)
    return dataset, graph, grid


def _read_table(path, expect_header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != tuple(expect_header):
            raise DataError(f"{path}: header must be {','.join(expect_header)}")
        return [tuple(row) for row in reader if row]


def _read_indexed(path, expect_header, n_rows, what):
    rows = _read_table(path, expect_header)
    out = np.full((n_rows, len(expect_header) - 1), np.nan)
    seen = set()
    for row in rows:
        try:
            ci = int(row[0])
        except ValueError:
            raise DataError(f"{what}: bad cell_index {row[0]!r}") from None
        if not (0 <= ci < n_rows):
            raise DataError(f"{what}: cell_index {ci} outside 0..{n_rows - 1}")
        if ci in seen:
            raise DataError(f"{what}: duplicate cell_index {ci}")
        seen.add(ci)
        out[ci] = [float(v) for v in row[1:]]
    if len(seen) != n_rows:
        raise DataError(f"{what}: expected {n_rows} rows, got {len(seen)}")
    return out


def fill_missing(values, mask):
    """Impute NaN entries by the previous valid value, else the next valid one.

    Idempotent; raises if a column has no valid value at all.
    """
    if values.shape != mask.shape:
        raise DataError(f"fill_missing: value/mask shapes differ {values.shape} vs {mask.shape}")
    if (~mask).sum(axis=0).min() == 0:
        bad = np.where((~mask).sum(axis=0) == 0)[0]
        raise DataError(f"fill_missing: column(s) entirely missing: {bad[:5].tolist()}")
    filled = values.copy()
    t_len, n = filled.shape
    for j in range(n):
        col = filled[:, j]
        miss = mask[:, j]
        if not miss.any():
            continue
        prev = np.nan
        for t in range(t_len):
            if miss[t]:
                col[t] = prev
            else:
                prev = col[t]
        nxt = np.nan
        for t in range(t_len - 1, -1, -1):
            if miss[t] and not math.isfinite(col[t]):
                col[t] = nxt
            elif not miss[t]:
                nxt = col[t]
    return filled


def split(dataset, ratios=(0.7, 0.1, 0.2), p=12, q=3):
    """Chronological train/val/test split.

    Train takes floor(T*r_train) steps, test floor(T*r_test), validation the
    remainder; every partition must fit at least one P+Q window.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise DataError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    t_len = dataset.n_steps
    train_end = int(t_len * ratios[0] + 1e-9)
    test_len = int(t_len * ratios[2] + 1e-9)
    val_end = t_len - test_len
    need = p + q
    sizes = {"train": train_end, "val": val_end - train_end, "test": t_len - val_end}
    for name, size in sizes.items():
        if size < need:
            raise DataError(
                f"{name} partition has {size} steps, too short for one {need}-step window"
            )
    dataset.train_end = train_end
    dataset.val_end = val_end
    return train_end, val_end


def zscore_fit_apply(dataset, eps=1e-8):
    """Fit per-series z-score stats on the training partition and apply everywhere."""
    if dataset.train_end == 0:
        raise DataError("zscore_fit_apply requires a split dataset")
    if np.isnan(dataset.x).any() or np.isnan(dataset.z).any():
        raise DataError("zscore_fit_apply requires filled series (run fill_missing)")
    tr = slice(0, dataset.train_end)
    x_mean = dataset.x[tr].mean(axis=0)
    x_std = np.maximum(dataset.x[tr].std(axis=0), eps)
    z_mean = dataset.z[tr].mean(axis=0)
    z_std = np.maximum(dataset.z[tr].std(axis=0), eps)
    dataset.norm = NormStats(x_mean, x_std, z_mean, z_std)
    dataset.x_norm = (dataset.x - x_mean) / x_std
    dataset.z_norm = (dataset.z - z_mean) / z_std
    return dataset.norm


def prepare_dataset(dataset, p=12, q=3, ratios=(0.7, 0.1, 0.2)):
    """Fill, split and normalize a freshly loaded dataset in place."""
    dataset.x = fill_missing(dataset.x, dataset.x_missing)
    dataset.z = fill_missing(dataset.z, dataset.z_missing)
    split(dataset, ratios, p, q)
    zscore_fit_apply(dataset)
    return dataset


def window(dataset, partition, p=12, q=3):
    """All P+Q windows fully inside one partition, in chronological order."""
    lo, hi = dataset.partition_bounds(partition)
    if dataset.x_norm is None:
        raise DataError("window requires a normalized dataset")
    samples = []
    for s in range(lo, hi - (p + q) + 1):
        m = s + p
        samples.append(Sample(
            start=s,
            x_hist=dataset.x_norm[s:m],
            z_hist=dataset.z_norm[s:m],
            y=dataset.x_norm[m:m + q],
            y_raw=dataset.x[m:m + q],
            y_missing=dataset.x_missing[m:m + q],
            times=dataset.timestamps[s:m + q],
        ))
    return samples


def road_cell_distances(graph, grid):
    """Haversine distance in meters from each road node to each cell center."""
    cl_lat, cl_lon = grid.cell_centers()
    return haversine_m(graph.lat[:, None], graph.lon[:, None],
                       cl_lat[None, :], cl_lon[None, :])


def _fmt(v):
    return "" if (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_dataset(data_dir, graph, grid, timestamps, x, z,
                  x_missing=None, z_missing=None):
    """Write a dataset directory in the standard file formats."""
    os.makedirs(data_dir, exist_ok=True)
    if x_missing is None:
        x_missing = np.zeros(x.shape, dtype=bool)
    if z_missing is None:
        z_missing = np.zeros(z.shape, dtype=bool)

    def path(name):
        return os.path.join(data_dir, name)

    with open(path("nodes.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("road_id", "lat", "lon"))
        for i, rid in enumerate(graph.road_ids):
            w.writerow((rid, repr(float(graph.lat[i])), repr(float(graph.lon[i]))))
    with open(path("edges.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("src", "dst", "distance_m"))
        for s, d, dist in zip(graph.edge_src, graph.edge_dst, graph.edge_dist):
            w.writerow((graph.road_ids[s], graph.road_ids[d], repr(float(dist))))
    _write_series(path("speeds.csv"), graph.road_ids, timestamps, x, x_missing)
    _write_series(path("population.csv"), [str(i) for i in range(grid.n_z)],
                  timestamps, z, z_missing)
    with open(path("poi.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("cell_index",) + POI_CATEGORIES)
        for ci in range(grid.n_z):
            w.writerow((ci,) + tuple(repr(float(v)) for v in grid.poi[ci]))
    if grid.sat is not None:
        with open(path("satfeat.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("cell_index",) + tuple(f"f{i}" for i in range(grid.sat.shape[1])))
            for ci in range(grid.n_z):
                w.writerow((ci,) + tuple(repr(float(v)) for v in grid.sat[ci]))
    with open(path("grid.json"), "w", encoding="utf-8") as fh:
        json.dump({"n_h": grid.n_h, "n_w": grid.n_w, "cell_size_m": grid.cell_size_m,
                   "origin_lat": grid.origin_lat, "origin_lon": grid.origin_lon}, fh)
        fh.write("\n")


def _write_series(path, columns, timestamps, values, missing):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("timestamp",) + tuple(columns))
        for t, ts in enumerate(timestamps):
            row = [ts.isoformat()]
            for j in range(values.shape[1]):
                row.append("" if missing[t, j] else repr(float(values[t, j])))
            w.writerow(row)
