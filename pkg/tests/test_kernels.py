"""Tests for attention kernels, graph operators, and the distance mask."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from gridcast.autodiff import (ParamStore, Tensor, backward, concat_last,
                               finite_diff_check, mean_abs, tensor)
from gridcast.data import haversine_m
from gridcast.errors import DataError, NumericError, ShapeError
from gridcast.kernels import (AttentionConfig, BipartiteTransform, DynamicConv,
                              GatedFusion, GaussianMask, GridConvBlock,
                              MultiHeadAttention, RegionalAdjacency,
                              SpatialAttention, TemporalAttention,
                              TemporalTransform, build_regional_adjacency,
                              dynamic_conv, gated_fusion, gaussian_mask,
                              masked_mh_attention, mh_attention,
                              regional_edge_weight)


def _np_softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_relu(a):
    return np.maximum(a, 0.0)


def _mha_oracle(store, name, xq, xk, xv, k, d_h, mask=None):
    """Direct per-head-loop reference for MultiHeadAttention."""
    def proj(part, x):
        w = store.get(f"{name}.{part}.w").data
        b = store.get(f"{name}.{part}.b").data
        return _np_relu(x @ w + b)

    q, kk, v = proj("f1", xq), proj("f2", xk), proj("f3", xv)
    heads = []
    for h in range(k):
        sl = slice(h * d_h, (h + 1) * d_h)
        scores = q[:, sl] @ kk[:, sl].T / math.sqrt(d_h)
        if mask is not None:
            scores = scores + mask[h]
        heads.append(_np_softmax(scores) @ v[:, sl])
    merged = np.concatenate(heads, axis=-1)
    return proj("fo", merged)


# =====================================================================
# Multi-head attention
# =====================================================================

class TestMultiHeadAttention:
    def _attn(self, d_q=3, d_k=3, d_v=3, k=2, d_h=2, seed=0):
        store = ParamStore(seed)
        cfg = AttentionConfig(k, d_h)
        return store, MultiHeadAttention(store, "attn", cfg, d_q, d_k, d_v)

    def test_matches_per_head_loop_oracle(self, rng):
        store, attn = self._attn()
        xq = rng.standard_normal((2, 3))
        xk = rng.standard_normal((4, 3))
        xv = rng.standard_normal((4, 3))
        out = attn(Tensor(xq), Tensor(xk), Tensor(xv))
        want = _mha_oracle(store, "attn", xq, xk, xv, 2, 2)
        assert_allclose(out.data, want, atol=1e-12)

    def test_masked_matches_oracle(self, rng):
        store, attn = self._attn()
        xq = rng.standard_normal((2, 3))
        xk = rng.standard_normal((4, 3))
        mask = rng.standard_normal((2, 2, 4))
        out = masked_mh_attention(Tensor(xq), Tensor(xk), Tensor(xk), mask, attn)
        want = _mha_oracle(store, "attn", xq, xk, xk, 2, 2, mask=mask)
        assert_allclose(out.data, want, atol=1e-12)

    def test_single_key_weight_is_one(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((3, 3)))
        xk = Tensor(rng.standard_normal((1, 3)))
        _, w = mh_attention(xq, xk, xk, attn, return_weights=True)
        assert w.shape == (2, 3, 1)
        assert_array_equal(w.data, np.ones((2, 3, 1)))

    def test_weight_rows_sum_to_one(self, rng):
        _, attn = self._attn(k=4, d_h=3)
        xq = Tensor(rng.standard_normal((5, 3)))
        xk = Tensor(rng.standard_normal((7, 3)))
        _, w = attn(xq, xk, xk, return_weights=True)
        assert w.shape == (4, 5, 7)
        assert_allclose(w.data.sum(axis=-1), np.ones((4, 5)), atol=1e-9)

    def test_output_width_is_k_times_dh(self, rng):
        _, attn = self._attn(k=3, d_h=5)
        x = Tensor(rng.standard_normal((4, 3)))
        assert attn(x, x, x).shape == (4, 15)

    def test_zero_mask_bitwise_equal_unmasked(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((4, 3)))
        plain = mh_attention(xq, xk, xk, attn)
        masked = masked_mh_attention(xq, xk, xk, np.zeros((2, 2, 4)), attn)
        assert_array_equal(plain.data, masked.data)

    def test_neg_inf_mask_selects_single_key(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((4, 3)))
        mask = np.full((2, 2, 4), -np.inf)
        mask[..., 1] = 0.0
        _, w = masked_mh_attention(xq, xk, xk, mask, attn, return_weights=True)
        want = np.zeros((2, 2, 4))
        want[..., 1] = 1.0
        assert_array_equal(w.data, want)

    def test_all_masked_row_raises(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((4, 3)))
        mask = np.zeros((2, 2, 4))
        mask[0, 1, :] = -np.inf
        with pytest.raises(NumericError, match="excludes every key"):
            attn(xq, xk, xk, mask=mask)

    def test_empty_keys_raise(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((0, 3)))
        with pytest.raises(ShapeError):
            attn(xq, xk, xk)

    def test_key_value_length_mismatch(self, rng):
        _, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((4, 3)))
        xv = Tensor(rng.standard_normal((5, 3)))
        with pytest.raises(ShapeError, match="lengths differ"):
            attn(xq, xk, xv)

    def test_gradients(self, rng):
        store, attn = self._attn()
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((4, 3)))

        def f(_):
            return mean_abs(attn(xq, xk, xk))

        assert finite_diff_check(f, store) < 1e-4


# =====================================================================
# Self-attention blocks
# =====================================================================

class TestConcatSelfAttention:
    def test_spatial_matches_manual_concat(self, rng):
        store = ParamStore(0)
        cfg = AttentionConfig(2, 3)
        att = SpatialAttention(store, "sp", cfg, 4)
        h = Tensor(rng.standard_normal((5, 4)))
        ste = Tensor(rng.standard_normal((5, 4)))
        out = att(h, ste)
        x = concat_last([h, ste])
        want = att.attn(x, x, x)
        assert_array_equal(out.data, want.data)

    def test_spatial_permutation_equivariance(self, rng):
        store = ParamStore(1)
        att = SpatialAttention(store, "sp", AttentionConfig(2, 2), 3)
        h = rng.standard_normal((6, 3))
        ste = rng.standard_normal((6, 3))
        perm = rng.permutation(6)
        base = att(Tensor(h), Tensor(ste)).data
        shuffled = att(Tensor(h[perm]), Tensor(ste[perm])).data
        assert_allclose(shuffled, base[perm], atol=1e-12)

    def test_temporal_score_shape_p_by_p(self, rng):
        store = ParamStore(0)
        att = TemporalAttention(store, "tm", AttentionConfig(2, 2), 3)
        h = Tensor(rng.standard_normal((7, 3)))
        ste = Tensor(rng.standard_normal((7, 3)))
        _, w = att(h, ste, return_weights=True)
        assert w.shape == (2, 7, 7)

    def test_shape_mismatch_raises(self, rng):
        store = ParamStore(0)
        att = SpatialAttention(store, "sp", AttentionConfig(2, 2), 3)
        with pytest.raises(ShapeError):
            att(Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((5, 3))))


# =====================================================================
# Gated fusion
# =====================================================================

class TestGatedFusion:
    def _fusion(self, d=4, kind="relu", seed=0):
        store = ParamStore(seed)
        return store, GatedFusion(store, "gate", d, kind)

    def test_zero_gate_passes_temporal(self, rng):
        store, fusion = self._fusion()
        for name in ("gate.w_s", "gate.w_t", "gate.b"):
            store.get(name).data = np.zeros_like(store.get(name).data)
        h_s = Tensor(rng.standard_normal((3, 4)))
        h_t = Tensor(rng.standard_normal((3, 4)))
        assert_array_equal(gated_fusion(h_s, h_t, fusion).data, h_t.data)

    def test_unit_gate_passes_spatial(self, rng):
        store, fusion = self._fusion()
        for name in ("gate.w_s", "gate.w_t"):
            store.get(name).data = np.zeros_like(store.get(name).data)
        store.get("gate.b").data = np.ones(4)
        h_s = Tensor(rng.standard_normal((3, 4)))
        h_t = Tensor(rng.standard_normal((3, 4)))
        assert_array_equal(gated_fusion(h_s, h_t, fusion).data, h_s.data)

    def test_sigmoid_kind_matches_oracle(self, rng):
        store, fusion = self._fusion(kind="sigmoid")
        h_s = rng.standard_normal((3, 4))
        h_t = rng.standard_normal((3, 4))
        w_s = store.get("gate.w_s").data
        w_t = store.get("gate.w_t").data
        b = store.get("gate.b").data
        gate = 1.0 / (1.0 + np.exp(-(h_s @ w_s + h_t @ w_t + b)))
        want = gate * h_s + (1.0 - gate) * h_t
        got = fusion(Tensor(h_s), Tensor(h_t)).data
        assert_allclose(got, want, atol=1e-12)

    def test_unknown_kind_rejected(self):
        store = ParamStore(0)
        with pytest.raises(ValueError, match="gate kind"):
            GatedFusion(store, "gate", 4, "tanh")

    def test_gradients(self, rng):
        store, fusion = self._fusion(kind="sigmoid")
        h_s = Tensor(rng.standard_normal((3, 4)))
        h_t = Tensor(rng.standard_normal((3, 4)))

        def f(_):
            return mean_abs(fusion(h_s, h_t))

        assert finite_diff_check(f, store) < 1e-4


# =====================================================================
# Dynamic graph convolution
# =====================================================================

class TestDynamicConv:
    def test_identity_adjacency_identity_weight(self, rng):
        h = rng.standard_normal((4, 3))
        out = dynamic_conv(Tensor(np.eye(4)), Tensor(h), Tensor(np.eye(3)))
        assert_array_equal(out.data, np.maximum(h, 0.0))

    def test_zero_row_yields_zero_output(self, rng):
        adj = np.eye(4)
        adj[2] = 0.0
        h = rng.standard_normal((4, 3))
        out = dynamic_conv(Tensor(adj), Tensor(h), Tensor(np.eye(3)))
        assert_array_equal(out.data[2], np.zeros(3))

    def test_three_cell_dense_oracle(self, rng):
        adj = rng.random((3, 3))
        h = rng.standard_normal((3, 5))
        w = rng.standard_normal((5, 5))
        want = np.zeros((3, 5))
        for i in range(3):
            for d in range(5):
                acc = 0.0
                for j in range(3):
                    for c in range(5):
                        acc += adj[i, j] * h[j, c] * w[c, d]
                want[i, d] = max(acc, 0.0)
        got = dynamic_conv(Tensor(adj), Tensor(h), Tensor(w)).data
        assert_allclose(got, want, atol=1e-12)

    def test_module_uses_store_weight(self, rng):
        store = ParamStore(0)
        conv = DynamicConv(store, "dc", 3)
        adj = Tensor(np.eye(2))
        h = rng.standard_normal((2, 3))
        want = np.maximum(h @ store.get("dc.w").data, 0.0)
        assert_allclose(conv(adj, Tensor(h)).data, want, atol=1e-12)


class TestGridConvBlock:
    def test_pointwise_kernel_matches_dense(self, rng):
        store = ParamStore(0)
        block = GridConvBlock(store, "g", 2, 3, 2, 4, kernel=1)
        h = rng.standard_normal((6, 2))          # 2x3 grid, 2 channels
        w = store.get("g.w").data[0, 0]
        store.get("g.b").data = rng.standard_normal(4)
        want = np.maximum(h @ w + store.get("g.b").data, 0.0)
        assert_allclose(block(Tensor(h)).data, want, atol=1e-12)

    def test_output_shape(self, rng):
        store = ParamStore(0)
        block = GridConvBlock(store, "g", 3, 4, 2, 5)
        out = block(Tensor(rng.standard_normal((12, 2))))
        assert out.shape == (12, 5)


# =====================================================================
# Regional adjacency
# =====================================================================

class TestRegionalEdgeWeight:
    def test_perfect_correlation_zero_distance(self):
        assert regional_edge_weight(1.0, 0.0, 300.0, 0.6) == 1.0

    def test_gate_is_strict(self):
        assert regional_edge_weight(0.6, 10.0, 300.0, 0.6) == 0.0
        assert regional_edge_weight(0.3, 10.0, 300.0, 0.6) == 0.0

    def test_distance_at_sigma(self):
        got = regional_edge_weight(0.8, 412.5, 412.5, 0.6)
        assert math.isclose(got, 0.8 * math.exp(-1.0), rel_tol=0.0, abs_tol=1e-12)


class TestBuildRegionalAdjacency:
    def _cells(self, n):
        lat = 37.49 + 0.0013 * np.arange(n)
        lon = np.full(n, 127.0)
        return lat, lon

    def test_small_case_matches_loop_oracle(self):
        lat, lon = self._cells(4)
        z = np.array([[1.0, 2.0, 4.0, 5.0],
                      [2.0, 4.0, 3.0, 5.0],
                      [3.0, 6.0, 2.0, 5.0],
                      [4.0, 8.0, 1.0, 5.0]])
        adj = build_regional_adjacency(z, lat, lon, 0.6)
        dist = haversine_m(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
        assert math.isclose(adj.sigma_dist, float(dist.std()), abs_tol=1e-9)
        corr = np.corrcoef(z[:, :3].T)
        want = np.zeros((4, 4))
        for i in range(3):
            for j in range(3):
                if corr[i, j] > 0.6:
                    want[i, j] = corr[i, j] * math.exp(-((dist[i, j] / adj.sigma_dist) ** 2))
        assert_allclose(adj.weights, want, atol=1e-12)

    def test_constant_cell_row_and_column_zero(self):
        lat, lon = self._cells(3)
        z = np.array([[1.0, 7.0, 2.0], [2.0, 7.0, 4.0], [3.0, 7.0, 6.0]])
        adj = build_regional_adjacency(z, lat, lon, 0.6)
        assert_array_equal(adj.weights[1], np.zeros(3))
        assert_array_equal(adj.weights[:, 1], np.zeros(3))
        assert_array_equal(adj.norm_weights[1], np.zeros(3))

    def test_rows_normalized(self):
        lat, lon = self._cells(3)
        rng = np.random.default_rng(0)
        base = rng.standard_normal(50)
        z = np.stack([base, base * 2 + 1, base + rng.standard_normal(50) * 0.1], axis=1)
        adj = build_regional_adjacency(z, lat, lon, 0.6)
        sums = adj.norm_weights.sum(axis=1)
        live = adj.weights.sum(axis=1) > 0
        assert_allclose(sums[live], np.ones(live.sum()), atol=1e-12)

    def test_anticorrelated_pair_dropped(self):
        lat, lon = self._cells(2)
        z = np.array([[1.0, 4.0], [2.0, 3.0], [3.0, 2.0], [4.0, 1.0]])
        adj = build_regional_adjacency(z, lat, lon, 0.6)
        assert adj.corr[0, 1] == pytest.approx(-1.0)
        assert adj.weights[0, 1] == 0.0
        # diagonal self-correlation survives the gate
        assert adj.weights[0, 0] == 1.0

    def test_bad_inputs(self):
        lat, lon = self._cells(3)
        with pytest.raises(DataError):
            build_regional_adjacency(np.zeros((5, 3, 1)), lat, lon, 0.6)
        with pytest.raises(DataError):
            build_regional_adjacency(np.zeros((1, 3)), lat, lon, 0.6)
        with pytest.raises(DataError):
            build_regional_adjacency(np.zeros((5, 2)), lat, lon, 0.6)


# =====================================================================
# Gaussian distance mask
# =====================================================================

class TestGaussianMask:
    def test_exact_values(self):
        s = np.full((1, 1), math.log(500.0))
        sigma = math.exp(s[0, 0])           # realized bandwidth, ~500 m
        d = np.array([[0.0, sigma, 2.0 * sigma]])
        m = gaussian_mask(d, Tensor(s))
        assert m.shape == (1, 1, 3)
        assert m.data[0, 0, 0] == 0.0
        assert m.data[0, 0, 1] == -0.5      # d = sigma, exactly
        assert m.data[0, 0, 2] == -2.0      # d = 2 sigma, exactly

    def test_per_head_bandwidths(self):
        s = np.log(np.array([[100.0, 300.0]]))
        sig = np.exp(s)
        d = np.array([[sig[0, 1]]])          # equals head 1's bandwidth
        m = gaussian_mask(d, Tensor(s)).data
        assert m.shape == (2, 1, 1)
        assert_allclose(m[0, 0, 0], -4.5, atol=1e-12)
        assert m[1, 0, 0] == -0.5

    def test_huge_sigma_nearly_unmasked(self, rng):
        store = ParamStore(0)
        attn = MultiHeadAttention(store, "attn", AttentionConfig(2, 2), 3, 3, 3)
        d = rng.uniform(0.0, 2000.0, (2, 5))
        gm = GaussianMask(store, "gm", 2, 2, sigma0_m=1e9)
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((5, 3)))
        plain = attn(xq, xk, xk).data
        masked = attn(xq, xk, xk, mask=gm(d)).data
        assert np.abs(plain - masked).max() < 1e-6

    def test_tiny_sigma_selects_nearest_cell(self, rng):
        store = ParamStore(0)
        attn = MultiHeadAttention(store, "attn", AttentionConfig(2, 2), 3, 3, 3)
        d = np.array([[100.0, 400.0, 700.0],
                      [650.0, 250.0, 900.0]])
        gm = GaussianMask(store, "gm", 2, 2, sigma0_m=1.0)
        xq = Tensor(rng.standard_normal((2, 3)))
        xk = Tensor(rng.standard_normal((3, 3)))
        _, w = attn(xq, xk, xk, mask=gm(d), return_weights=True)
        assert_allclose(w.data[:, 0, 0], 1.0, atol=1e-6)
        assert_allclose(w.data[:, 1, 1], 1.0, atol=1e-6)

    def test_sigma_accessor_roundtrip(self):
        store = ParamStore(0)
        gm = GaussianMask(store, "gm", 3, 2, sigma0_m=500.0)
        assert_allclose(gm.sigma(), np.full((3, 2), 500.0), atol=1e-9)

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            gaussian_mask(np.zeros((2, 3)), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            gaussian_mask(np.zeros((4, 3)), Tensor(np.zeros((2, 2))))

    def test_mask_gradient_in_log_bandwidth(self, rng):
        store = ParamStore(0)
        gm = GaussianMask(store, "gm", 2, 2, sigma0_m=400.0)
        d = rng.uniform(50.0, 1200.0, (2, 5))

        def f(_):
            return mean_abs(gm(d))

        assert finite_diff_check(f, store) < 1e-4


# =====================================================================
# Transform attentions
# =====================================================================

class TestTransforms:
    def test_bipartite_uses_concat_keys(self, rng):
        store = ParamStore(0)
        cfg = AttentionConfig(2, 3)
        bt = BipartiteTransform(store, "bt", cfg, 4)
        ste_x = Tensor(rng.standard_normal((3, 4)))
        h_z = Tensor(rng.standard_normal((6, 4)))
        ste_z = Tensor(rng.standard_normal((6, 4)))
        out = bt(ste_x, h_z, ste_z)
        keys = concat_last([h_z, ste_z])
        want = bt.attn(ste_x, keys, h_z)
        assert_array_equal(out.data, want.data)
        assert out.shape == (3, 6)

    def test_bipartite_weight_shape_roads_by_cells(self, rng):
        store = ParamStore(0)
        bt = BipartiteTransform(store, "bt", AttentionConfig(2, 2), 4)
        ste_x = Tensor(rng.standard_normal((3, 4)))
        h_z = Tensor(rng.standard_normal((6, 4)))
        ste_z = Tensor(rng.standard_normal((6, 4)))
        _, w = bt(ste_x, h_z, ste_z, return_weights=True)
        assert w.shape == (2, 3, 6)

    def test_temporal_transform_q_by_p_scores(self, rng):
        store = ParamStore(0)
        tt = TemporalTransform(store, "tt", AttentionConfig(2, 2), 4)
        q_seq = Tensor(rng.standard_normal((3, 4)))
        k_seq = Tensor(rng.standard_normal((12, 4)))
        out, w = tt(q_seq, k_seq, k_seq, return_weights=True)
        assert out.shape == (3, 4)
        assert w.shape == (2, 3, 12)

    def test_temporal_transform_single_history_step(self, rng):
        store = ParamStore(0)
        tt = TemporalTransform(store, "tt", AttentionConfig(2, 2), 4)
        q_seq = Tensor(rng.standard_normal((3, 4)))
        k_seq = Tensor(rng.standard_normal((1, 4)))
        _, w = tt(q_seq, k_seq, k_seq, return_weights=True)
        assert_array_equal(w.data, np.ones((2, 3, 1)))

    def test_temporal_transform_oracle(self, rng):
        store = ParamStore(3)
        tt = TemporalTransform(store, "tt", AttentionConfig(2, 2), 4)
        q_seq = rng.standard_normal((2, 4))
        k_seq = rng.standard_normal((5, 4))
        got = tt(Tensor(q_seq), Tensor(k_seq), Tensor(k_seq)).data
        want = _mha_oracle(store, "tt", q_seq, k_seq, k_seq, 2, 2)
        assert_allclose(got, want, atol=1e-12)

    def test_key_value_mismatch_raises(self, rng):
        store = ParamStore(0)
        tt = TemporalTransform(store, "tt", AttentionConfig(2, 2), 4)
        q = Tensor(rng.standard_normal((3, 4)))
        with pytest.raises(ShapeError):
            tt(q, Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal((6, 4))))

    def test_bipartite_gradients_through_mask(self, rng):
        store = ParamStore(0)
        bt = BipartiteTransform(store, "bt", AttentionConfig(2, 2), 4)
        gm = GaussianMask(store, "gm", 3, 2, sigma0_m=400.0)
        d = rng.uniform(50.0, 900.0, (3, 6))
        ste_x = Tensor(rng.standard_normal((3, 4)))
        h_z = Tensor(rng.standard_normal((6, 4)))
        ste_z = Tensor(rng.standard_normal((6, 4)))

        def f(_):
            return mean_abs(bt(ste_x, h_z, ste_z, mask=gm(d)))

        assert finite_diff_check(f, store) < 1e-4
