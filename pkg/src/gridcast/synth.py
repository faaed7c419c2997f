"""Synthetic city generator with a controllable population-speed coupling.

The road graph is a ring with chords laid out inside the cell grid.  Cell
populations follow archetype-specific daily and weekly cycles plus seeded
localized event surges and noise.  Road speeds follow a twice-daily
rush-hour harmonic minus ``alpha`` times the lagged, normalized population
of nearby cells, so ``alpha`` dials the strength of the regional signal;
``alpha = 0`` makes speeds statistically independent of the population
series.  Same spec and seed always produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timedelta

import numpy as np

from .data import (RegionGrid, RoadGraph, TrafficDataset, _DEG_PER_M_LAT,
                   haversine_m, road_cell_distances, write_dataset)
from .errors import ConfigError, DataError

# Mean POI counts per category for the two cell archetypes
# (shopping, food, cafe, beauty, work, hospital, school, a&e, lodging, nightlife)
_POI_COMMERCIAL = np.array([40.0, 30.0, 20.0, 12.0, 25.0, 3.0, 1.0, 4.0, 3.0, 8.0])
_POI_RESIDENTIAL = np.array([8.0, 10.0, 4.0, 3.0, 5.0, 2.0, 5.0, 1.0, 1.0, 1.0])


@dataclass
class SynthSpec:
    """Generator settings; defaults give the desk-scale benchmark city."""

    n_roads: int = 20
    n_h: int = 6
    n_w: int = 6
    cell_size_m: float = 150.0
    steps: int = 3000
    seed: int = 0
    alpha: float = 0.8             # strength of the population-speed coupling
    lag_hours: int = 1             # population lead time entering speeds
    coupling_kmh: float = 8.0      # km/h per unit of normalized local population
    noise_kmh: float = 1.0         # iid speed noise
    pop_noise_frac: float = 0.05   # population noise relative to cell base level
    commercial_frac: float = 0.5
    event_rate: float = 0.004      # per cell-hour probability of an event onset
    event_min_h: int = 2
    event_max_h: int = 6
    event_magnitude: float = 2.5   # surge peak in multiples of the cell base level
    sat_dim: int = 8
    missing_frac: float = 0.0
    start: str = "2018-03-01T00:00:00"
    origin_lat: float = 37.49
    origin_lon: float = 127.02

    def validate(self):
        if self.n_roads < 2 or self.n_h < 1 or self.n_w < 1:
            raise ConfigError("n_roads >= 2 and a non-empty grid are required")
        if self.steps < 150:
            raise ConfigError(f"steps must be at least 150, got {self.steps}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lag_hours < 0:
            raise ConfigError("lag_hours must be non-negative")
        if not (0.0 <= self.missing_frac < 0.5):
            raise ConfigError(f"missing_frac must lie in [0, 0.5), got {self.missing_frac}")
        if self.event_min_h < 1 or self.event_max_h < self.event_min_h:
            raise ConfigError("event duration bounds must satisfy 1 <= min <= max")
        if not (0.0 <= self.event_rate < 1.0):
            raise ConfigError("event_rate must lie in [0, 1)")
        if not (0.0 <= self.commercial_frac <= 1.0):
            raise ConfigError("commercial_frac must lie in [0, 1]")
        if self.sat_dim < 0:
            raise ConfigError("sat_dim must be non-negative")
        return self

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(doc):
        known = {f.name for f in fields(SynthSpec)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth spec key(s): {sorted(unknown)}")
        spec = SynthSpec(**doc)
        spec.validate()
        return spec


@dataclass
class SynthResult:
    graph: RoadGraph
    grid: RegionGrid
    timestamps: tuple
    x: np.ndarray
    x_missing: np.ndarray
    z: np.ndarray
    z_missing: np.ndarray

    def as_dataset(self):
        return TrafficDataset(self.timestamps, self.x.copy(), self.z.copy(),
                              self.x_missing.copy(), self.z_missing.copy())


def _ring_graph(spec, rng):
    """Ring of roads with a few chords, laid out inside the grid."""
    n = spec.n_roads
    width_m = spec.n_w * spec.cell_size_m
    height_m = spec.n_h * spec.cell_size_m
    radius = 0.35 * min(width_m, height_m)
    cx, cy = width_m / 2.0, height_m / 2.0
    deg_lon = _DEG_PER_M_LAT / math.cos(math.radians(spec.origin_lat))
    angles = 2.0 * math.pi * (np.arange(n) + rng.uniform(-0.2, 0.2, n)) / n
    xs = cx + radius * np.cos(angles)
    ys = cy + radius * np.sin(angles)
    lat = spec.origin_lat + ys * _DEG_PER_M_LAT
    lon = spec.origin_lon + xs * deg_lon
    ids = tuple(f"r{i:03d}" for i in range(n))

    pairs = [(i, (i + 1) % n) for i in range(n)]
    for _ in range(max(1, n // 4)):
        a, b = rng.integers(0, n, 2)
        if a != b and (a, b) not in pairs and (b, a) not in pairs:
            pairs.append((int(a), int(b)))
    src, dst, dist = [], [], []
    for a, b in pairs:
        d = float(haversine_m(lat[a], lon[a], lat[b], lon[b]))
        for s, t in ((a, b), (b, a)):
            src.append(s)
            dst.append(t)
            dist.append(d)
    return RoadGraph(ids, lat, lon, np.array(src, dtype=np.intp),
                     np.array(dst, dtype=np.intp), np.array(dist))


def inject_missing(values, frac, seed):
    """Mark an exact count round(frac * size) of entries missing (NaN + mask).

    Entries are drawn without replacement; frac must lie in [0, 0.5)."""
    if not (0.0 <= frac < 0.5):
        raise DataError(f"missing fraction must lie in [0, 0.5), got {frac}")
    values = np.asarray(values, dtype=np.float64).copy()
    mask = np.zeros(values.shape, dtype=bool)
    k = int(round(frac * values.size))
    if k:
        rng = np.random.default_rng(seed)
        flat = rng.choice(values.size, size=k, replace=False)
        mask.ravel()[flat] = True
        values.ravel()[flat] = np.nan
    return values, mask


def generate(spec, out_dir=None):
    """Generate a synthetic dataset; optionally write it as a data directory."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_z = spec.n_h * spec.n_w
    t_len = spec.steps

    # cells: archetypes, POI counts, auxiliary features
    commercial = rng.random(n_z) < spec.commercial_frac
    lam = np.where(commercial[:, None], _POI_COMMERCIAL[None, :], _POI_RESIDENTIAL[None, :])
    intensity = 0.5 + rng.random(n_z)
    poi = rng.poisson(lam * intensity[:, None]).astype(np.float64)
    sat = None
    if spec.sat_dim > 0:
        protos = rng.normal(0.0, 1.0, (2, spec.sat_dim))
        sat = protos[commercial.astype(int)] + rng.normal(0.0, 0.3, (n_z, spec.sat_dim))
    grid = RegionGrid(spec.n_h, spec.n_w, spec.cell_size_m,
                      spec.origin_lat, spec.origin_lon, poi, sat)

    graph = _ring_graph(spec, rng)

    start = datetime.fromisoformat(spec.start)
    timestamps = tuple(start + timedelta(hours=t) for t in range(t_len))
    hours = np.array([ts.hour for ts in timestamps], dtype=np.float64)
    weekend = np.array([ts.weekday() >= 5 for ts in timestamps])

    # population: base level * daily cycle * weekly cycle + events + noise
    base = np.where(commercial, 600.0, 250.0) * intensity
    daily_c = 1.0 + 0.45 * np.cos(2.0 * math.pi * (hours - 14.0) / 24.0)
    daily_r = 1.0 + 0.30 * np.cos(2.0 * math.pi * (hours - 21.0) / 24.0)
    daily = np.where(commercial[None, :], daily_c[:, None], daily_r[:, None])
    week_c = np.where(weekend, 0.8, 1.1)
    week_r = np.where(weekend, 1.1, 0.95)
    weekly = np.where(commercial[None, :], week_c[:, None], week_r[:, None])
    z = base[None, :] * daily * weekly

    cl_lat, cl_lon = grid.cell_centers()
    cell_dist = haversine_m(cl_lat[:, None], cl_lon[:, None],
                            cl_lat[None, :], cl_lon[None, :])
    spread = np.exp(-(cell_dist / 250.0) ** 2)     # event spillover to neighbors
    if spec.event_rate > 0.0:
        onsets = rng.random((t_len, n_z)) < spec.event_rate
        for t0, c in np.argwhere(onsets):
            dur = int(rng.integers(spec.event_min_h, spec.event_max_h + 1))
            peak = spec.event_magnitude * (0.5 + rng.random()) * base[c]
            hold = max(1, dur // 2)
            profile = np.concatenate([np.ones(hold),
                                      np.linspace(1.0, 0.0, dur - hold, endpoint=False)])
            stop = min(t_len, t0 + dur)
            z[t0:stop] += peak * np.outer(profile[:stop - t0], spread[c])
    z += rng.normal(0.0, spec.pop_noise_frac * base[None, :], (t_len, n_z))
    z = np.maximum(z, 0.0)

    # local exposure: mean population of cells within 500 m of each road
    d_mat = road_cell_distances(graph, grid)
    near = d_mat <= 500.0
    for i in range(graph.n_x):
        if not near[i].any():
            near[i, np.argmin(d_mat[i])] = True
    local = z @ (near.T / near.sum(axis=1))
    mu = local.mean(axis=0)
    sd = local.std(axis=0)
    local_norm = (local - mu) / np.maximum(sd, 1e-9)
    lag = spec.lag_hours
    if lag > 0:
        lagged = np.vstack([np.repeat(local_norm[:1], lag, axis=0), local_norm[:-lag]])
    else:
        lagged = local_norm

    # speeds: free-flow level + twice-daily rush-hour dip - coupled load + noise
    v0 = rng.uniform(38.0, 52.0, graph.n_x)
    harmonic = -4.0 * np.cos(2.0 * math.pi * (hours - 8.0) / 12.0)
    x = v0[None, :] + harmonic[:, None] \
        - spec.alpha * spec.coupling_kmh * lagged \
        + rng.normal(0.0, spec.noise_kmh, (t_len, graph.n_x))
    x = np.clip(x, 1.0, 80.0)

    if spec.missing_frac > 0.0:
        x, x_missing = inject_missing(x, spec.missing_frac, spec.seed + 1)
    else:
        x_missing = np.zeros(x.shape, dtype=bool)
    z_missing = np.zeros(z.shape, dtype=bool)

    result = SynthResult(graph, grid, timestamps, x, x_missing, z, z_missing)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_dataset(out_dir, graph, grid, timestamps, x, z, x_missing, z_missing)
        with open(os.path.join(out_dir, "synth_spec.json"), "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh)
            fh.write("\n")
    return result
