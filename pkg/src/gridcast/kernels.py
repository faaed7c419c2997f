"""Attention kernels and graph operators.

All kernels attend over the second-to-last axis and accept arbitrary
leading batch axes; heads are folded into an extra leading axis inside
multi-head attention.  Projections follow the f(x) = ReLU(x W + b)
convention throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Affine, Tensor, add, concat_last, div, exp, matmul,
                       moveaxis, mul, relu, reshape, scale, sigmoid,
                       softmax_last, sub, swap_last2, conv2d_grid)
from .data import haversine_m
from .errors import DataError, NumericError, ShapeError

_ONE = Tensor(1.0)


@dataclass(frozen=True)
class AttentionConfig:
    """Head count and per-head width; model width is their product."""

    k: int
    d_h: int

    @property
    def d(self):
        return self.k * self.d_h


def _split_heads(t, k, d_h):
    s = t.shape
    t = reshape(t, s[:-1] + (k, d_h))    # (..., N, K, d_h)
    return moveaxis(t, -2, -3)           # (..., K, N, d_h)


def _merge_heads(t):
    t = moveaxis(t, -3, -2)              # (..., N, K, d_h)
    s = t.shape
    return reshape(t, s[:-2] + (s[-2] * s[-1],))


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections and output map.

    Computes softmax(Q K^T / sqrt(d_h) + M) V per head, concatenates heads
    and applies an output projection.  The optional additive mask broadcasts
    against the per-head score tensor (..., K, N_q, N_k).
    """

    def __init__(self, store, name, cfg, d_q, d_k, d_v):
        d = cfg.d
        self.cfg = cfg
        self.f1 = Affine(store, f"{name}.f1", d_q, d)
        self.f2 = Affine(store, f"{name}.f2", d_k, d)
        self.f3 = Affine(store, f"{name}.f3", d_v, d)
        self.fo = Affine(store, f"{name}.fo", d, d)

    def __call__(self, xq, xk, xv, mask=None, return_weights=False):
        if xk.shape[-2] < 1:
            raise ShapeError("attention needs at least one key position")
        if xk.shape[-2] != xv.shape[-2]:
            raise ShapeError(
                f"attention key/value lengths differ: {xk.shape} vs {xv.shape}"
            )
        k_heads, d_h = self.cfg.k, self.cfg.d_h
        q = _split_heads(self.f1(xq), k_heads, d_h)
        k = _split_heads(self.f2(xk), k_heads, d_h)
        v = _split_heads(self.f3(xv), k_heads, d_h)
        scores = scale(matmul(q, swap_last2(k)), 1.0 / math.sqrt(d_h))
        if mask is not None:
            mask = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=np.float64))
            scores = add(scores, mask)
            if np.isneginf(scores.data).all(axis=-1).any():
                raise NumericError("masked attention: a query row excludes every key")
        weights = softmax_last(scores)
        out = self.fo(_merge_heads(matmul(weights, v)))
        return (out, weights) if return_weights else out


def mh_attention(xq, xk, xv, attn, return_weights=False):
    """Unmasked multi-head attention through a prebuilt MultiHeadAttention."""
    return attn(xq, xk, xv, return_weights=return_weights)


def masked_mh_attention(xq, xk, xv, mask, attn, return_weights=False):
    """Multi-head attention with an additive per-head score mask."""
    return attn(xq, xk, xv, mask=mask, return_weights=return_weights)


class ConcatSelfAttention:
    """Self-attention over inputs concatenated with their embedding slice."""

    def __init__(self, store, name, cfg, d_model):
        self.attn = MultiHeadAttention(store, name, cfg, 2 * d_model, 2 * d_model, 2 * d_model)

    def __call__(self, h, ste, return_weights=False):
        if h.shape != ste.shape:
            raise ShapeError(f"self-attention input/embedding shapes differ: {h.shape} vs {ste.shape}")
        x = concat_last([h, ste])
        return self.attn(x, x, x, return_weights=return_weights)


class SpatialAttention(ConcatSelfAttention):
    """Attention across locations at one time step; input (..., N, D)."""


class TemporalAttention(ConcatSelfAttention):
    """Attention across time steps at one location; input (..., T, D)."""


class GatedFusion:
    """Blend spatial and temporal branches through a learned gate.

    gate = act(H_S W_s + H_T W_t + b); output = gate*H_S + (1-gate)*H_T.
    """

    def __init__(self, store, name, d, kind="relu"):
        if kind not in ("relu", "sigmoid"):
            raise ValueError(f"unknown gate kind: {kind!r}")
        self.kind = kind
        self.w_s = store.param(f"{name}.w_s", (d, d))
        self.w_t = store.param(f"{name}.w_t", (d, d))
        self.b = store.param(f"{name}.b", (d,), init="zeros")

    def __call__(self, h_s, h_t):
        if h_s.shape != h_t.shape:
            raise ShapeError(f"gated_fusion operand shapes differ: {h_s.shape} vs {h_t.shape}")
        pre = add(add(matmul(h_s, self.w_s), matmul(h_t, self.w_t)), self.b)
        gate = relu(pre) if self.kind == "relu" else sigmoid(pre)
        return add(mul(gate, h_s), mul(sub(_ONE, gate), h_t))


def gated_fusion(h_s, h_t, fusion):
    return fusion(h_s, h_t)


def dynamic_conv(adj_norm, h, w):
    """One propagation step over the cell graph: ReLU(A_norm H W)."""
    return relu(matmul(matmul(adj_norm, h), w))


class DynamicConv:
    """Graph propagation with a trained (D, D) weight; no bias term."""

    def __init__(self, store, name, d):
        self.w = store.param(f"{name}.w", (d, d))

    def __call__(self, adj_norm, h):
        return dynamic_conv(adj_norm, h, self.w)


class GridConvBlock:
    """5x5 same-padding convolution over the cell grid with bias and ReLU."""

    def __init__(self, store, name, n_h, n_w, c_in, c_out, kernel=5):
        self.n_h, self.n_w = n_h, n_w
        self.w = store.param(f"{name}.w", (kernel, kernel, c_in, c_out))
        self.b = store.param(f"{name}.b", (c_out,), init="zeros")

    def __call__(self, h):
        return relu(add(conv2d_grid(h, self.w, self.n_h, self.n_w), self.b))


@dataclass(frozen=True)
class RegionalAdjacency:
    """Correlation-gated, distance-damped cell adjacency."""

    weights: np.ndarray        # (N_Z, N_Z) raw weights
    norm_weights: np.ndarray   # row-normalized; all-zero rows stay zero
    corr: np.ndarray           # (N_Z, N_Z) Pearson correlations
    sigma_dist: float          # std of all pairwise center distances, meters
    lambda_r: float


def regional_edge_weight(r, d, sigma_dist, lambda_r):
    """Weight of one cell pair: r * exp(-(d/sigma)^2) when r exceeds the gate."""
    if not (r > lambda_r):
        return 0.0
    return r * math.exp(-((d / sigma_dist) ** 2))


def build_regional_adjacency(z_train, cell_lat, cell_lon, lambda_r):
    """Build the cell adjacency from training-partition series and cell centers.

    Pairs are kept only when their Pearson correlation strictly exceeds
    ``lambda_r``; kept weights decay with squared center distance scaled by
    the std of all pairwise distances.  Constant series correlate 0 with
    everything (including themselves), so their rows stay all-zero.
    """
    z_train = np.asarray(z_train, dtype=np.float64)
    if z_train.ndim != 2:
        raise DataError(f"build_regional_adjacency expects (T, N_Z) series, got {z_train.shape}")
    t_len, n_z = z_train.shape
    if t_len < 2:
        raise DataError(f"build_regional_adjacency needs at least 2 time steps, got {t_len}")
    if len(cell_lat) != n_z or len(cell_lon) != n_z:
        raise DataError("build_regional_adjacency: cell coordinate count differs from series")

    centered = z_train - z_train.mean(axis=0)
    denom = np.sqrt((centered * centered).sum(axis=0))
    alive = denom > 0.0
    safe = np.where(alive, denom, 1.0)
    corr = (centered.T @ centered) / np.outer(safe, safe)
    corr[~alive, :] = 0.0
    corr[:, ~alive] = 0.0
    diag = np.where(alive, 1.0, 0.0)
    np.fill_diagonal(corr, diag)

    dist = haversine_m(np.asarray(cell_lat)[:, None], np.asarray(cell_lon)[:, None],
                       np.asarray(cell_lat)[None, :], np.asarray(cell_lon)[None, :])
    sigma_dist = float(dist.std())
    if sigma_dist == 0.0:
        sigma_dist = 1.0
    weights = np.where(corr > lambda_r, corr * np.exp(-((dist / sigma_dist) ** 2)), 0.0)
    row_sums = weights.sum(axis=1, keepdims=True)
    norm = np.divide(weights, row_sums, out=np.zeros_like(weights), where=row_sums > 0)
    return RegionalAdjacency(weights, norm, corr, sigma_dist, lambda_r)


def gaussian_mask(d_mat, s):
    """Per-head proximity mask -(d/sigma)^2 / 2 with sigma = exp(s).

    d_mat: (N_X, N_Z) distances in meters; s: (N_X, K) log-bandwidths.
    Returns (K, N_X, N_Z); differentiable in s.
    """
    if s.ndim != 2:
        raise ShapeError(f"gaussian_mask log-bandwidths must be (N_X, K), got {s.shape}")
    n_x, k = s.shape
    d_t = d_mat if isinstance(d_mat, Tensor) else Tensor(np.asarray(d_mat, dtype=np.float64))
    if d_t.shape[0] != n_x:
        raise ShapeError(f"gaussian_mask: distances {d_t.shape} do not match bandwidths {s.shape}")
    sig = reshape(moveaxis(exp(s), 0, 1), (k, n_x, 1))
    ratio = div(d_t, sig)
    return scale(mul(ratio, ratio), -0.5)


class GaussianMask:
    """Trainable per-road, per-head distance bandwidths, sigma = exp(s)."""

    def __init__(self, store, name, n_x, k, sigma0_m=500.0):
        self.s = store.param(f"{name}.sigma_log", (n_x, k),
                             init=("const", math.log(sigma0_m)))

    def __call__(self, d_mat):
        return gaussian_mask(d_mat, self.s)

    def sigma(self):
        return np.exp(self.s.data)


class BipartiteTransform:
    """Cross-attention carrying cell-level state onto road nodes.

    Query comes from the road embedding slice, keys from cell state
    concatenated with the cell embedding slice, values from cell state
    alone; an additive per-head mask localizes each road's receptive field.
    """

    def __init__(self, store, name, cfg, d):
        self.attn = MultiHeadAttention(store, name, cfg, d_q=d, d_k=2 * d, d_v=d)

    def __call__(self, ste_x_t, h_z, ste_z_t, mask=None, return_weights=False):
        keys = concat_last([h_z, ste_z_t])
        return self.attn(ste_x_t, keys, h_z, mask=mask, return_weights=return_weights)


class TemporalTransform:
    """Cross-attention mapping a length-P sequence onto the Q-step horizon."""

    def __init__(self, store, name, cfg, d):
        self.attn = MultiHeadAttention(store, name, cfg, d, d, d)

    def __call__(self, q_seq, k_seq, v_seq, return_weights=False):
        if k_seq.shape[-2] != v_seq.shape[-2]:
            raise ShapeError(
                f"temporal transform key/value lengths differ: {k_seq.shape} vs {v_seq.shape}"
            )
        return self.attn(q_seq, k_seq, v_seq, return_weights=return_weights)
