"""Model assembly: configuration, forward pipeline, loss, checkpoints.

The forecaster runs two coupled branches.  The region branch propagates
cell-population state through dynamic graph convolutions and temporal
attention, then maps history onto the forecast horizon.  A masked
bipartite attention carries the resulting regional knowledge onto road
nodes at every time step, and the road branch fuses it with spatial and
temporal self-attention over the road graph before a two-layer head emits
the Q-step speed forecast.  Ablation variants swap or drop pieces of the
region branch while leaving the road branch intact.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (Fcn2, ParamStore, Tensor, abs_, add, broadcast_to,
                       mean_abs, moveaxis, mul, reshape, scale, slice_axis,
                       sum_all, sub, tensor)
from .data import NormStats, road_cell_distances
from .embeddings import ONE_HOT_DIM, cell_geo_features, node2vec_embed
from .errors import ConfigError, DataError, NumericError, ShapeError
from .kernels import (AttentionConfig, BipartiteTransform, DynamicConv,
                      GatedFusion, GaussianMask, GridConvBlock,
                      SpatialAttention, TemporalAttention, TemporalTransform,
                      build_regional_adjacency)

VARIANTS = ("full", "no-region", "no-mask", "no-poi", "no-sat",
            "static-region", "cnn-spatial")


@dataclass
class ModelConfig:
    """Architecture and training settings with their default values."""

    p: int = 12                    # history steps
    q: int = 3                     # forecast steps
    d: int = 64                    # model width
    k: int = 8                     # attention heads
    d_h: int | None = None         # per-head width; derived as d // k when unset
    l_x: int = 3                   # road ST-attention blocks per stack
    l_z: int = 2                   # region ST-attention blocks per stack
    lambda_r: float = 0.6          # correlation gate for the cell adjacency
    learning_rate: float = 0.001
    seed: int = 0
    epochs: int = 100
    patience: int = 10
    gate_kind: str = "relu"        # "relu" | "sigmoid"
    corr_span: str = "train"       # "train" | "full"
    batch_size: int = 8
    variant: str = "full"
    sigma0_m: float = 500.0        # initial bipartite mask bandwidth, meters
    max_train_windows: int | None = None
    max_batches_per_epoch: int | None = None
    target_train_mae: float | None = None
    exclude_imputed: bool = True

    def __post_init__(self):
        if self.d_h is None and self.k > 0:
            self.d_h = self.d // self.k

    def validate(self):
        if min(self.p, self.q, self.d, self.k, self.l_x, self.l_z) < 1:
            raise ConfigError("p, q, d, k, l_x, l_z must all be positive")
        if self.d_h is None or self.k * self.d_h != self.d:
            raise ConfigError(f"head split mismatch: k={self.k} * d_h={self.d_h} != d={self.d}")
        if self.gate_kind not in ("relu", "sigmoid"):
            raise ConfigError(f"gate_kind must be 'relu' or 'sigmoid', got {self.gate_kind!r}")
        if self.corr_span not in ("train", "full"):
            raise ConfigError(f"corr_span must be 'train' or 'full', got {self.corr_span!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not (0.0 < self.lambda_r < 1.0):
            raise ConfigError(f"lambda_r must lie in (0, 1), got {self.lambda_r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 0:
            raise ConfigError("batch_size >= 1, epochs >= 1, patience >= 0 required")
        if self.sigma0_m <= 0:
            raise ConfigError("sigma0_m must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(doc):
        known = {f.name for f in fields(ModelConfig)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        cfg = ModelConfig(**doc)
        cfg.validate()
        return cfg


@contextmanager
def _stage(name):
    try:
        yield
    except ShapeError as e:
        raise ShapeError(f"[{name}] {e}") from None
    except NumericError as e:
        raise NumericError(f"[{name}] {e}") from None


class _RoadBlock:
    """Spatial attention, temporal attention, gated fusion, residual add."""

    def __init__(self, store, name, cfg, d, gate_kind):
        self.spatial = SpatialAttention(store, f"{name}.spatial", cfg, d)
        self.temporal = TemporalAttention(store, f"{name}.temporal", cfg, d)
        self.gate = GatedFusion(store, f"{name}.gate", d, gate_kind)

    def __call__(self, h, ste):
        h_s = self.spatial(h, ste)
        h_t = moveaxis(self.temporal(moveaxis(h, 1, 2), moveaxis(ste, 1, 2)), 1, 2)
        return add(self.gate(h_s, h_t), h)


class _RegionBlock:
    """Graph propagation (or grid CNN), temporal attention, gate, residual."""

    def __init__(self, store, name, cfg, d, gate_kind, spatial_kind, grid_shape=None):
        if spatial_kind == "dynamic":
            self.conv = DynamicConv(store, f"{name}.dynconv", d)
        else:
            n_h, n_w = grid_shape
            self.conv = GridConvBlock(store, f"{name}.conv", n_h, n_w, d, d)
        self.spatial_kind = spatial_kind
        self.temporal = TemporalAttention(store, f"{name}.temporal", cfg, d)
        self.gate = GatedFusion(store, f"{name}.gate", d, gate_kind)

    def __call__(self, h, ste, adj_norm):
        if self.spatial_kind == "dynamic":
            h_s = self.conv(adj_norm, h)
        else:
            h_s = self.conv(h)
        h_t = moveaxis(self.temporal(moveaxis(h, 1, 2), moveaxis(ste, 1, 2)), 1, 2)
        return add(self.gate(h_s, h_t), h)


class TrafficModel:
    """Region-knowledge-augmented road speed forecaster."""

    def __init__(self, config, n_x, n_z=None, grid_shape=None, *,
                 e_x, geo=None, d_mat=None, adjacency=None):
        config.validate()
        self.config = config
        self.n_x = int(n_x)
        v = config.variant
        self.uses_region = v != "no-region"
        self.dynamic_region = self.uses_region and v != "static-region"
        self.uses_mask = self.uses_region and v != "no-mask"

        if e_x.shape[0] != n_x:
            raise ConfigError(f"road embedding rows {e_x.shape[0]} != n_x {n_x}")
        self.e_x = np.asarray(e_x, dtype=np.float64)
        self.n_z = int(n_z) if n_z is not None else None
        self.grid_shape = grid_shape
        if self.uses_region:
            if geo is None or d_mat is None or self.n_z is None:
                raise ConfigError(f"variant {v!r} needs cell features and road-cell distances")
            self.geo = np.asarray(geo, dtype=np.float64)
            self.d_mat = np.asarray(d_mat, dtype=np.float64)
            if self.d_mat.shape != (self.n_x, self.n_z):
                raise ConfigError(
                    f"road-cell distances shaped {self.d_mat.shape}, expected {(self.n_x, self.n_z)}"
                )
        else:
            self.geo = None
            self.d_mat = None
        if self.dynamic_region:
            if adjacency is None:
                raise ConfigError(f"variant {v!r} needs a regional adjacency")
            self.adjacency = adjacency
            self.adj_norm = Tensor(adjacency.norm_weights)
        else:
            self.adjacency = None
            self.adj_norm = None
        if v in ("static-region", "cnn-spatial") and grid_shape is None:
            raise ConfigError(f"variant {v!r} needs the grid shape")

        store = ParamStore(config.seed)
        self.store = store
        acfg = AttentionConfig(config.k, config.d_h)
        d = config.d

        self.ste_temporal = Fcn2(store, "ste.temporal", ONE_HOT_DIM, d, d)
        self.ste_road = Fcn2(store, "ste.road_spatial", self.e_x.shape[1], d, d)
        if self.uses_region:
            self.ste_region = Fcn2(store, "ste.region_spatial", self.geo.shape[1], d, d)
        self.in_road = Fcn2(store, "input.road", 1, d, d)

        if self.dynamic_region:
            spatial_kind = "conv" if v == "cnn-spatial" else "dynamic"
            self.in_region = Fcn2(store, "input.region", 1, d, d)
            self.region_encoder = [
                _RegionBlock(store, f"region_encoder.block{i}", acfg, d,
                             config.gate_kind, spatial_kind, grid_shape)
                for i in range(config.l_z)
            ]
            self.region_ttrans = TemporalTransform(store, "region_ttrans", acfg, d)
            self.region_decoder = [
                _RegionBlock(store, f"region_decoder.block{i}", acfg, d,
                             config.gate_kind, spatial_kind, grid_shape)
                for i in range(config.l_z)
            ]
        elif v == "static-region":
            n_h, n_w = grid_shape
            self.static_cnn = [
                GridConvBlock(store, f"static_region.conv{i}", n_h, n_w,
                              self.geo.shape[1] if i == 0 else d, d)
                for i in range(config.l_z)
            ]
        if self.uses_region:
            self.bipartite = BipartiteTransform(store, "bipartite", acfg, d)
            if self.uses_mask:
                self.gauss = GaussianMask(store, "bipartite", self.n_x, config.k,
                                          config.sigma0_m)

        self.road_encoder = [
            _RoadBlock(store, f"road_encoder.block{i}", acfg, d, config.gate_kind)
            for i in range(config.l_x)
        ]
        self.road_ttrans = TemporalTransform(store, "road_ttrans", acfg, d)
        self.road_decoder = [
            _RoadBlock(store, f"road_decoder.block{i}", acfg, d, config.gate_kind)
            for i in range(config.l_x)
        ]
        self.out_head = Fcn2(store, "output.head", d, d, 1, final_activation="identity")

    # ---------------------------------------------------------------- build

    @classmethod
    def build(cls, config, graph, grid, dataset=None, e_x=None):
        """Assemble a model for a dataset, computing frozen inputs as needed."""
        config.validate()
        v = config.variant
        if e_x is None:
            e_x = node2vec_embed(graph, config.d, config.seed)
        geo = d_mat = adjacency = None
        n_z = grid.n_z if grid is not None else None
        grid_shape = (grid.n_h, grid.n_w) if grid is not None else None
        if v != "no-region":
            if grid is None:
                raise ConfigError(f"variant {v!r} needs a region grid")
            geo = cell_geo_features(grid, use_poi=v != "no-poi", use_sat=v != "no-sat")
            d_mat = road_cell_distances(graph, grid)
        if v not in ("no-region", "static-region"):
            if dataset is None:
                raise ConfigError(f"variant {v!r} needs dataset series for the adjacency")
            span = dataset.train_end if config.corr_span == "train" else dataset.n_steps
            if span < 2:
                raise DataError("adjacency needs at least 2 steps in the correlation span")
            lat, lon = grid.cell_centers()
            adjacency = build_regional_adjacency(dataset.z[:span], lat, lon, config.lambda_r)
        return cls(config, graph.n_x, n_z, grid_shape,
                   e_x=e_x, geo=geo, d_mat=d_mat, adjacency=adjacency)

    # -------------------------------------------------------------- forward

    def _check_finite(self, name, t):
        if not np.isfinite(t.data).all():
            raise NumericError(f"non-finite values after stage {name!r}")
        return t

    def ste_batch(self, onehots):
        """Batched spatio-temporal embeddings from (B, P+Q, 31) one-hots."""
        b, t, _ = onehots.shape
        d = self.config.d
        temp = self.ste_temporal(onehots if isinstance(onehots, Tensor) else tensor(onehots))
        temp = reshape(temp, (b, t, 1, d))
        ste_x = add(temp, self.ste_road(tensor(self.e_x)))
        ste_z = None
        if self.uses_region:
            ste_z = add(temp, self.ste_region(tensor(self.geo)))
        return ste_x, ste_z

    def forward(self, x_hist, z_hist, ste_x, ste_z, zero_regional=False):
        """Forward pass on a window batch.

        x_hist: (B, P, N_X) normalized speeds; z_hist: (B, P, N_Z) normalized
        populations (ignored by variants without a dynamic region branch);
        ste_x: (B, P+Q, N_X, D); ste_z: (B, P+Q, N_Z, D) or None.
        Returns (B, Q, N_X) normalized speed predictions.
        """
        cfg = self.config
        p, q, d = cfg.p, cfg.q, cfg.d
        if x_hist.ndim != 3 or x_hist.shape[1] != p or x_hist.shape[2] != self.n_x:
            raise ShapeError(f"x_hist must be (B, {p}, {self.n_x}), got {x_hist.shape}")
        b = x_hist.shape[0]
        if ste_x.shape != (b, p + q, self.n_x, d):
            raise ShapeError(f"ste_x must be {(b, p + q, self.n_x, d)}, got {ste_x.shape}")

        ste_x_p = slice_axis(ste_x, 1, 0, p)
        ste_x_q = slice_axis(ste_x, 1, p, p + q)
        if self.uses_region:
            if ste_z.shape != (b, p + q, self.n_z, d):
                raise ShapeError(f"ste_z must be {(b, p + q, self.n_z, d)}, got {ste_z.shape}")
            ste_z_p = slice_axis(ste_z, 1, 0, p)
            ste_z_q = slice_axis(ste_z, 1, p, p + q)

        with _stage("input_projection"):
            h_x = self.in_road(reshape(x_hist, (b, p, self.n_x, 1)))
            self._check_finite("input_projection", h_x)

        hk_p = hk_q = None
        if self.dynamic_region:
            if z_hist is None or z_hist.shape != (b, p, self.n_z):
                got = None if z_hist is None else z_hist.shape
                raise ShapeError(f"z_hist must be (B, {p}, {self.n_z}), got {got}")
            with _stage("input_projection"):
                h_z = self.in_region(reshape(z_hist, (b, p, self.n_z, 1)))
            with _stage("region_encoder"):
                for block in self.region_encoder:
                    h_z = block(h_z, ste_z_p, self.adj_norm)
                self._check_finite("region_encoder", h_z)
            with _stage("region_transform"):
                h_z_dec = moveaxis(self.region_ttrans(
                    moveaxis(ste_z_q, 1, 2), moveaxis(ste_z_p, 1, 2),
                    moveaxis(h_z, 1, 2)), 1, 2)
                h_z_dec = add(h_z_dec, ste_z_q)
            with _stage("region_decoder"):
                for block in self.region_decoder:
                    h_z_dec = block(h_z_dec, ste_z_q, self.adj_norm)
                self._check_finite("region_decoder", h_z_dec)
            h_z_p_src, h_z_q_src = h_z, h_z_dec
        elif self.uses_region:
            with _stage("static_region"):
                h_static = tensor(self.geo)
                for block in self.static_cnn:
                    h_static = block(h_static)
                h_static = reshape(h_static, (1, 1, self.n_z, d))
                self._check_finite("static_region", h_static)
            h_z_p_src = broadcast_to(h_static, (b, p, self.n_z, d))
            h_z_q_src = broadcast_to(h_static, (b, q, self.n_z, d))

        if self.uses_region:
            with _stage("bipartite"):
                mask = self.gauss(self.d_mat) if self.uses_mask else None
                hk_p = add(self.bipartite(ste_x_p, h_z_p_src, ste_z_p, mask=mask), ste_x_p)
                hk_q = add(self.bipartite(ste_x_q, h_z_q_src, ste_z_q, mask=mask), ste_x_q)
                if zero_regional:
                    hk_p = scale(hk_p, 0.0)
                    hk_q = scale(hk_q, 0.0)
                self._check_finite("bipartite", hk_q)

        with _stage("road_encoder"):
            for block in self.road_encoder:
                h_x = block(h_x, ste_x_p)
            self._check_finite("road_encoder", h_x)

        with _stage("road_transform"):
            if self.uses_region:
                q_in = moveaxis(hk_q, 1, 2)
                k_in = moveaxis(hk_p, 1, 2)
            else:
                q_in = moveaxis(ste_x_q, 1, 2)
                k_in = moveaxis(ste_x_p, 1, 2)
            h_x_dec = self.road_ttrans(q_in, k_in, moveaxis(h_x, 1, 2))
            h_x_dec = moveaxis(add(h_x_dec, q_in), 1, 2)
            self._check_finite("road_transform", h_x_dec)

        with _stage("road_decoder"):
            for block in self.road_decoder:
                h_x_dec = block(h_x_dec, ste_x_q)
            self._check_finite("road_decoder", h_x_dec)

        with _stage("output_head"):
            y_hat = reshape(self.out_head(h_x_dec), (b, q, self.n_x))
            self._check_finite("output_head", y_hat)
        return y_hat

    def run_window_batch(self, batch, zero_regional=False):
        """Forward a WindowBatch (see training module)."""
        x = tensor(batch.x)
        z = tensor(batch.z) if (self.dynamic_region and batch.z is not None) else None
        ste_x, ste_z = self.ste_batch(tensor(batch.onehots))
        return self.forward(x, z, ste_x, ste_z, zero_regional=zero_regional)

    def predict_samples(self, samples, batch_size=64, threads=1):
        """Normalized (W, Q, N_X) predictions for a list of Samples; no recording.

        With threads > 1 the batches are evaluated concurrently; forward
        passes share only read-only state, and chunks are merged in window
        order so the result is identical to the sequential path.
        """
        from .training import make_batch  # local import to avoid a cycle

        def run(lo):
            batch = make_batch(samples[lo:lo + batch_size], self.dynamic_region)
            return self.run_window_batch(batch).data

        starts = range(0, len(samples), batch_size)
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(max_workers=threads) as pool:
                chunks = list(pool.map(run, starts))
        else:
            chunks = [run(lo) for lo in starts]
        return np.concatenate(chunks, axis=0)

    # ------------------------------------------------------------ accounting

    def expected_param_count(self):
        """Closed-form audit of the total trainable value count."""
        cfg = self.config
        d = cfg.d

        def affine(i, o):
            return i * o + o

        def fcn2(i, h, o):
            return affine(i, h) + affine(h, o)

        def attention(dq, dk, dv):
            return affine(dq, d) + affine(dk, d) + affine(dv, d) + affine(d, d)

        gate = 2 * d * d + d
        self_att = attention(2 * d, 2 * d, 2 * d)
        road_block = 2 * self_att + gate
        conv = lambda c_in: 5 * 5 * c_in * d + d

        total = fcn2(ONE_HOT_DIM, d, d) + fcn2(self.e_x.shape[1], d, d)
        total += fcn2(1, d, d)                          # road input
        total += fcn2(d, d, 1)                          # output head
        total += 2 * cfg.l_x * road_block
        total += attention(d, d, d)                     # road temporal transform
        if self.uses_region:
            total += fcn2(self.geo.shape[1], d, d)
            total += attention(d, 2 * d, d)             # bipartite
            if self.uses_mask:
                total += self.n_x * cfg.k
        if self.dynamic_region:
            total += fcn2(1, d, d)                      # region input
            spatial = conv(d) if cfg.variant == "cnn-spatial" else d * d
            region_block = spatial + self_att + gate
            total += 2 * cfg.l_z * region_block
            total += attention(d, d, d)                 # region temporal transform
        elif self.uses_region:
            total += conv(self.geo.shape[1]) + (cfg.l_z - 1) * conv(d)
        return total

    # ----------------------------------------------------------- checkpoints

    def save_checkpoint(self, path, norm):
        save_checkpoint(path, self.config, self.store, norm)

    def load_params(self, state):
        try:
            self.store.load_state(state, strict=True)
        except ValueError as e:
            raise ConfigError(f"checkpoint does not match model: {e}") from None


def mae_loss(y_hat, y, weights=None):
    """Mean absolute error; optional 0/1 weights exclude entries."""
    y_t = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    if y_hat.shape != y_t.shape:
        raise ShapeError(f"loss operands differ in shape: {y_hat.shape} vs {y_t.shape}")
    diff = sub(y_hat, y_t)
    if weights is None:
        return mean_abs(diff)
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
    count = float(w.data.sum())
    if count == 0:
        raise DataError("mae_loss: every target entry is excluded")
    return scale(sum_all(mul(abs_(diff), w)), 1.0 / count)


def _json_floats(obj):
    """Round-trip-exact float serialization: shortest repr preserves bits."""
    if isinstance(obj, float):
        return obj
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _json_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_floats(v) for v in obj]
    return obj


def save_checkpoint(path, config, store, norm):
    """Write config, normalization stats and every parameter tensor as JSON."""
    doc = {
        "config": config.to_dict(),
        "norm": norm.to_dict() if norm is not None else None,
        "params": {
            name: {"shape": list(p.data.shape),
                   "data": [float(v) for v in p.data.ravel()]}
            for name, p in store.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_json_floats(doc), fh)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, NormStats | None, param state)."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from None
    for key in ("config", "params"):
        if key not in doc:
            raise DataError(f"{path}: missing {key!r} section")
    config = ModelConfig.from_dict(doc["config"])
    norm = NormStats.from_dict(doc["norm"]) if doc.get("norm") else None
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return config, norm, params


def restore_model(path, graph, grid, dataset=None, e_x=None):
    """Rebuild a model from a checkpoint against a dataset's frozen inputs."""
    config, norm, params = load_checkpoint(path)
    model = TrafficModel.build(config, graph, grid, dataset, e_x=e_x)
    model.load_params(params)
    return model, norm
