"""Tests for dataset ingestion, imputation, splitting, normalization, windows.

File-format behavior is checked against small handwritten CSV fixtures; the
chronological split is pinned to its floor-arithmetic examples; geometry is
checked against a haversine oracle.
"""

import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridcast.data import (EARTH_RADIUS_M, NormStats, POI_CATEGORIES,
                           RegionGrid, RoadGraph, TrafficDataset,
                           fill_missing, haversine_m, load_dataset,
                           prepare_dataset, road_cell_distances, split,
                           window, write_dataset, zscore_fit_apply)
from gridcast.errors import DataError


def _hours(start, n):
    t0 = datetime.fromisoformat(start)
    return tuple(t0 + timedelta(hours=i) for i in range(n))


def _mini_dir(tmp_path, n_roads=2, n_h=2, n_w=2, t_len=30, missing=(), sat=None):
    """Write a small dataset directory; `missing` lists (t, road) holes."""
    rng = np.random.default_rng(0)
    ids = tuple(f"r{i:02d}" for i in range(n_roads))
    lat = 37.5 + 0.001 * np.arange(n_roads)
    lon = np.full(n_roads, 127.0)
    src = np.arange(n_roads - 1, dtype=np.intp)
    dst = np.arange(1, n_roads, dtype=np.intp)
    dist = np.full(n_roads - 1, 120.0)
    graph = RoadGraph(ids, lat, lon, src, dst, dist)
    poi = rng.integers(0, 20, (n_h * n_w, 10)).astype(float)
    grid = RegionGrid(n_h, n_w, 150.0, 37.49, 126.99, poi, sat)
    x = 40.0 + rng.standard_normal((t_len, n_roads))
    z = 500.0 + 50.0 * rng.standard_normal((t_len, n_h * n_w))
    x_missing = np.zeros(x.shape, dtype=bool)
    for t, j in missing:
        x_missing[t, j] = True
    write_dataset(tmp_path, graph, grid, _hours("2018-03-01T00:00:00", t_len),
                  x, z, x_missing)
    return graph, grid, x, z, x_missing


# =====================================================================
# Geometry
# =====================================================================

class TestHaversine:
    def test_zero_distance(self):
        assert haversine_m(37.5, 127.0, 37.5, 127.0) == 0.0

    def test_meridian_cell_pitch(self):
        # consecutive cell centers along a meridian sit one cell size apart
        grid = RegionGrid(3, 1, 150.0, 37.49, 127.0,
                          np.zeros((3, 10)), None)
        lat, lon = grid.cell_centers()
        d = haversine_m(lat[0], lon[0], lat[1], lon[1])
        assert abs(d - 150.0) < 1e-6

    def test_quarter_circumference(self):
        d = haversine_m(0.0, 0.0, 0.0, 90.0)
        assert_allclose(d, math.pi * EARTH_RADIUS_M / 2.0, rtol=1e-12)

    def test_road_cell_matrix_shape_and_symmetry(self):
        graph = RoadGraph(("a", "b"), np.array([37.5, 37.5]),
                          np.array([127.0, 127.0]),
                          np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp),
                          np.empty(0))
        grid = RegionGrid(2, 2, 150.0, 37.49, 126.99, np.zeros((4, 10)), None)
        d = road_cell_distances(graph, grid)
        assert d.shape == (2, 4)
        assert_array_equal(d[0], d[1])   # identical roads, identical rows


class TestRegionGrid:
    def test_cell_center_order_row_major(self):
        grid = RegionGrid(2, 3, 150.0, 37.0, 127.0, np.zeros((6, 10)), None)
        lat, lon = grid.cell_centers()
        assert lat.shape == (6,)
        # first row of cells shares a latitude; longitude increases eastward
        assert_allclose(lat[:3], lat[0], atol=0)
        assert lon[0] < lon[1] < lon[2]
        assert lat[3] > lat[0]

    def test_coincident_road_and_center(self):
        grid = RegionGrid(1, 1, 150.0, 37.0, 127.0, np.zeros((1, 10)), None)
        lat, lon = grid.cell_centers()
        graph = RoadGraph(("a",), lat.copy(), lon.copy(),
                          np.empty(0, dtype=np.intp), np.empty(0, dtype=np.intp),
                          np.empty(0))
        assert road_cell_distances(graph, grid)[0, 0] == 0.0


# =====================================================================
# Graph construction
# =====================================================================

class TestRoadGraph:
    def test_nodes_sorted_by_id(self):
        graph = RoadGraph.from_rows(
            [("b", 37.0, 127.0), ("a", 38.0, 128.0)],
            [("a", "b", 100.0)])
        assert graph.road_ids == ("a", "b")
        assert graph.lat[0] == 38.0
        assert graph.edge_src[0] == 0 and graph.edge_dst[0] == 1

    def test_duplicate_road_id_raises(self):
        with pytest.raises(DataError, match="duplicated road_id"):
            RoadGraph.from_rows([("a", 1, 2), ("a", 3, 4)], [])

    def test_unknown_endpoint_raises(self):
        with pytest.raises(DataError, match="unknown road_id"):
            RoadGraph.from_rows([("a", 1, 2)], [("a", "zz", 5.0)])

    def test_non_positive_distance_raises(self):
        with pytest.raises(DataError):
            RoadGraph.from_rows([("a", 1, 2), ("b", 3, 4)], [("a", "b", 0.0)])


# =====================================================================
# Loading
# =====================================================================

class TestLoadDataset:
    def test_mini_fixture_counts(self, tmp_path):
        _mini_dir(tmp_path, n_roads=2, n_h=2, n_w=2)
        dataset, graph, grid = load_dataset(tmp_path)
        assert graph.n_x == 2
        assert grid.n_z == 4
        assert dataset.x.shape == (30, 2)
        assert dataset.z.shape == (30, 4)

    def test_gangnam_shaped_header_counts(self, tmp_path):
        # production-scale column counts: 148 roads, 34x33 cells
        _mini_dir(tmp_path, n_roads=148, n_h=34, n_w=33, t_len=2)
        dataset, graph, grid = load_dataset(tmp_path)
        assert graph.n_x == 148
        assert grid.n_z == 1122
        assert dataset.z.shape == (2, 1122)

    def test_missing_entries_become_nan_with_mask(self, tmp_path):
        _mini_dir(tmp_path, missing=((3, 1), (7, 0)))
        dataset, _, _ = load_dataset(tmp_path)
        assert np.isnan(dataset.x[3, 1]) and dataset.x_missing[3, 1]
        assert np.isnan(dataset.x[7, 0]) and dataset.x_missing[7, 0]
        assert dataset.x_missing.sum() == 2

    def test_satfeat_roundtrip(self, tmp_path):
        sat = np.random.default_rng(1).standard_normal((4, 3))
        _mini_dir(tmp_path, sat=sat)
        _, _, grid = load_dataset(tmp_path)
        assert_allclose(grid.sat, sat, atol=0)

    def test_missing_file_raises(self, tmp_path):
        _mini_dir(tmp_path)
        (tmp_path / "poi.csv").unlink()
        with pytest.raises(DataError, match="missing required file"):
            load_dataset(tmp_path)

    def test_bad_speed_value_raises(self, tmp_path):
        _mini_dir(tmp_path)
        path = tmp_path / "speeds.csv"
        lines = path.read_text().splitlines()
        lines[1] = lines[1].rsplit(",", 1)[0] + ",oops"
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="bad value"):
            load_dataset(tmp_path)

    def test_timestamp_gap_raises(self, tmp_path):
        _mini_dir(tmp_path)
        for name in ("speeds.csv", "population.csv"):
            path = tmp_path / name
            lines = path.read_text().splitlines()
            del lines[5]
            path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="gap larger than one hour"):
            load_dataset(tmp_path)

    def test_unknown_column_raises(self, tmp_path):
        _mini_dir(tmp_path)
        path = tmp_path / "speeds.csv"
        text = path.read_text().replace("r01", "r99")
        path.write_text(text)
        with pytest.raises(DataError, match="unknown column"):
            load_dataset(tmp_path)

    def test_poi_header_fixed_categories(self):
        assert len(POI_CATEGORIES) == 10


# =====================================================================
# Imputation
# =====================================================================

class TestFillMissing:
    def test_forward_fill_wins(self):
        vals = np.array([[1.0], [np.nan], [np.nan], [4.0]])
        mask = np.isnan(vals)
        # previous-valid wins: holes carry the last value before them
        assert_array_equal(fill_missing(vals, mask)[:, 0], [1.0, 1.0, 1.0, 4.0])

    def test_backward_fill_at_head(self):
        vals = np.array([[np.nan], [5.0]])
        assert_array_equal(fill_missing(vals, np.isnan(vals))[:, 0], [5.0, 5.0])

    def test_previous_valid_at_tail(self):
        vals = np.array([[7.0], [np.nan]])
        assert_array_equal(fill_missing(vals, np.isnan(vals))[:, 0], [7.0, 7.0])

    def test_no_missing_identity(self, rng):
        vals = rng.standard_normal((6, 3))
        out = fill_missing(vals, np.zeros(vals.shape, dtype=bool))
        assert_array_equal(out, vals)

    def test_idempotent(self, rng):
        vals = rng.standard_normal((8, 2))
        mask = rng.random((8, 2)) < 0.3
        vals = np.where(mask, np.nan, vals)
        once = fill_missing(vals, mask)
        twice = fill_missing(once, mask)
        assert_array_equal(once, twice)

    def test_all_missing_column_raises(self):
        vals = np.full((3, 1), np.nan)
        with pytest.raises(DataError, match="entirely missing"):
            fill_missing(vals, np.isnan(vals))


# =====================================================================
# Split
# =====================================================================

def _series_dataset(t_len, n_x=2, n_z=3, start="2018-03-01T00:00:00"):
    rng = np.random.default_rng(t_len)
    return TrafficDataset(
        _hours(start, t_len),
        40.0 + rng.standard_normal((t_len, n_x)),
        500.0 + rng.standard_normal((t_len, n_z)),
        np.zeros((t_len, n_x), dtype=bool),
        np.zeros((t_len, n_z), dtype=bool),
    )


class TestSplit:
    def test_production_length(self):
        # floor arithmetic on the benchmark length: 4392 -> 3074/440/878
        dataset = _series_dataset(4392)
        train_end, val_end = split(dataset)
        assert train_end == 3074
        assert val_end - train_end == 440
        assert dataset.n_steps - val_end == 878

    def test_exact_ratios(self):
        dataset = _series_dataset(100, n_x=1, n_z=1)
        train_end, val_end = split(dataset, p=5, q=2)
        assert (train_end, val_end - train_end, 100 - val_end) == (70, 10, 20)

    def test_too_short_partition_raises(self):
        dataset = _series_dataset(20, n_x=1, n_z=1)
        with pytest.raises(DataError, match="too short"):
            split(dataset, p=12, q=3)

    def test_bad_ratios_raise(self):
        dataset = _series_dataset(100, n_x=1, n_z=1)
        with pytest.raises(DataError):
            split(dataset, ratios=(0.5, 0.2, 0.2))

    def test_partition_bounds(self):
        dataset = _series_dataset(100, n_x=1, n_z=1)
        split(dataset, p=5, q=2)
        assert dataset.partition_bounds("train") == (0, 70)
        assert dataset.partition_bounds("val") == (70, 80)
        assert dataset.partition_bounds("test") == (80, 100)
        with pytest.raises(DataError):
            dataset.partition_bounds("bogus")


# =====================================================================
# Normalization
# =====================================================================

class TestZScore:
    def test_two_point_case(self):
        dataset = _series_dataset(10, n_x=1, n_z=1)
        dataset.x[:, 0] = [2.0, 4.0] * 5
        dataset.train_end, dataset.val_end = 2, 4
        norm = zscore_fit_apply(dataset)
        assert norm.x_mean[0] == 3.0 and norm.x_std[0] == 1.0
        assert_array_equal(dataset.x_norm[:2, 0], [-1.0, 1.0])

    def test_constant_series_epsilon_guard(self):
        dataset = _series_dataset(10, n_x=1, n_z=1)
        dataset.x[:] = 42.0
        dataset.train_end, dataset.val_end = 7, 8
        zscore_fit_apply(dataset)
        assert_array_equal(dataset.x_norm, np.zeros((10, 1)))

    def test_roundtrip_inverse(self):
        dataset = _series_dataset(50)
        dataset.train_end, dataset.val_end = 35, 40
        norm = zscore_fit_apply(dataset)
        assert_allclose(norm.denorm_x(dataset.x_norm), dataset.x, atol=1e-12)

    def test_stats_read_training_partition_only(self):
        # mutating val/test values leaves the fitted stats bitwise unchanged
        a = _series_dataset(50)
        b = TrafficDataset(a.timestamps, a.x.copy(), a.z.copy(),
                           a.x_missing.copy(), a.z_missing.copy())
        for d in (a, b):
            d.train_end, d.val_end = 35, 40
        b.x[35:] += 1000.0
        b.z[35:] -= 777.0
        na, nb = zscore_fit_apply(a), zscore_fit_apply(b)
        assert_array_equal(na.x_mean, nb.x_mean)
        assert_array_equal(na.x_std, nb.x_std)
        assert_array_equal(na.z_mean, nb.z_mean)
        assert_array_equal(na.z_std, nb.z_std)

    def test_requires_split_and_filled(self):
        dataset = _series_dataset(10)
        with pytest.raises(DataError, match="split"):
            zscore_fit_apply(dataset)
        dataset.train_end, dataset.val_end = 7, 8
        dataset.x[0, 0] = np.nan
        with pytest.raises(DataError, match="filled"):
            zscore_fit_apply(dataset)

    def test_norm_stats_dict_roundtrip(self):
        norm = NormStats(np.array([1.0]), np.array([2.0]),
                         np.array([3.0]), np.array([4.0]))
        back = NormStats.from_dict(norm.to_dict())
        assert_array_equal(back.x_std, norm.x_std)


# =====================================================================
# Windowing
# =====================================================================

class TestWindow:
    def _prepared(self, t_len, p, q):
        dataset = _series_dataset(t_len, n_x=2, n_z=3)
        prepare_dataset(dataset, p, q)
        return dataset

    def test_boundary_single_sample(self):
        # a 15-step partition fits exactly one 12+3 window
        dataset = _series_dataset(100, n_x=1, n_z=1)
        dataset.train_end, dataset.val_end = 15, 85
        zscore_fit_apply(dataset)
        assert len(window(dataset, "train", 12, 3)) == 1

    def test_sample_count_arithmetic(self):
        dataset = _series_dataset(100, n_x=1, n_z=1)
        dataset.train_end, dataset.val_end = 100 - 15, 100 - 15
        zscore_fit_apply(dataset)
        assert len(window(dataset, "train", 12, 3)) == 86 - 15 + 1 - 1 + 14 - 14
        # equivalently: 85 - 15 + 1 = 71 windows in 85 steps
        assert len(window(dataset, "train", 12, 3)) == 71

    def test_targets_are_slices_of_normalized_series(self):
        dataset = self._prepared(80, 6, 2)
        s = window(dataset, "train", 6, 2)[3]
        assert_array_equal(s.y, dataset.x_norm[s.start + 6:s.start + 8])
        assert_array_equal(s.x_hist, dataset.x_norm[s.start:s.start + 6])
        assert_array_equal(s.y_raw, dataset.x[s.start + 6:s.start + 8])

    def test_windows_stay_inside_partition(self):
        dataset = self._prepared(80, 6, 2)
        for part in ("train", "val", "test"):
            lo, hi = dataset.partition_bounds(part)
            for s in window(dataset, part, 6, 2):
                assert s.start >= lo and s.start + 8 <= hi

    def test_times_cover_history_and_horizon(self):
        dataset = self._prepared(80, 6, 2)
        s = window(dataset, "val", 6, 2)[0]
        assert len(s.times) == 8
        assert s.times[0] == dataset.timestamps[s.start]


# =====================================================================
# Round trip through files
# =====================================================================

class TestWriteReadRoundtrip:
    def test_values_and_masks_survive(self, tmp_path, rng):
        graph, grid, x, z, x_missing = _mini_dir(
            tmp_path, missing=((2, 0), (9, 1)))
        dataset, graph2, grid2 = load_dataset(tmp_path)
        assert graph2.road_ids == graph.road_ids
        assert_array_equal(dataset.x_missing, x_missing)
        valid = ~x_missing
        assert_array_equal(dataset.x[valid], x[valid])
        assert_allclose(dataset.z, z, atol=0)
        assert_allclose(grid2.poi, grid.poi, atol=0)
