"""Spatial and temporal input embeddings.

Road nodes get a frozen random-walk embedding (uniform node2vec walks plus
skip-gram with negative sampling); cells get geographic feature vectors
(scaled coordinates, log-scaled POI counts, optional auxiliary features).
Either is pushed through a two-layer FCN and summed with a shared temporal
embedding of the hour-of-day/day-of-week one-hot to form the spatio-temporal
embedding used by the attention blocks.
"""

from __future__ import annotations

import json
import logging
import math

import numpy as np

from .autodiff import add, reshape, tensor
from .errors import DataError

log = logging.getLogger("gridcast")

HOURS = 24
WEEKDAYS = 7
ONE_HOT_DIM = HOURS + WEEKDAYS   # 31

# Walk and skip-gram settings for the road embedding (kept fixed; the
# embedding is frozen after pre-training so these are not run-time knobs).
WALKS_PER_NODE = 10
WALK_LENGTH = 20
WINDOW = 5
NEGATIVES = 5
SGNS_EPOCHS = 5
LR0 = 0.025
LR_MIN = 1e-4


def temporal_onehot(ts):
    """31-dim one-hot: hour of day then weekday (Monday = index 0)."""
    vec = np.zeros(ONE_HOT_DIM)
    vec[ts.hour] = 1.0
    vec[HOURS + ts.weekday()] = 1.0
    return vec


def temporal_onehots(timestamps):
    """(T, 31) stack of one-hots for a timestamp sequence."""
    out = np.zeros((len(timestamps), ONE_HOT_DIM))
    for i, ts in enumerate(timestamps):
        out[i, ts.hour] = 1.0
        out[i, HOURS + ts.weekday()] = 1.0
    return out


def _neighbor_lists(graph):
    """Symmetrized, sorted adjacency lists (walks ignore edge direction)."""
    nbrs = [set() for _ in range(graph.n_x)]
    for s, d in zip(graph.edge_src, graph.edge_dst):
        if s != d:
            nbrs[s].add(int(d))
            nbrs[d].add(int(s))
    return [sorted(n) for n in nbrs]


def node2vec_embed(graph, d_emb, seed):
    """Frozen road embedding: (N_X, d_emb) array.

    Uniform second-order-neutral walks (return and in-out bias both 1), then
    skip-gram with negative sampling.  Single-threaded and fully determined
    by the seed.  Nodes with no edges get zero vectors.
    """
    n = graph.n_x
    rng = np.random.default_rng(seed)
    nbrs = _neighbor_lists(graph)
    isolated = [v for v in range(n) if not nbrs[v]]

    walks = []
    for _ in range(WALKS_PER_NODE):
        for v in range(n):
            if not nbrs[v]:
                continue
            walk = [v]
            while len(walk) < WALK_LENGTH:
                options = nbrs[walk[-1]]
                walk.append(options[rng.integers(len(options))])
            walks.append(walk)

    w_in = (rng.random((n, d_emb)) - 0.5) / d_emb
    if not walks:
        log.warning("node2vec: graph has no edges; all embeddings are zero")
        return np.zeros((n, d_emb))

    counts = np.bincount(np.concatenate([np.asarray(w) for w in walks]), minlength=n)
    noise = counts.astype(np.float64) ** 0.75
    noise /= noise.sum()

    w_out = np.zeros((n, d_emb))
    total_centers = SGNS_EPOCHS * sum(len(w) for w in walks)
    processed = 0
    for _ in range(SGNS_EPOCHS):
        for walk in walks:
            for i, center in enumerate(walk):
                lr = max(LR_MIN, LR0 * (1.0 - processed / total_centers))
                processed += 1
                ctx = walk[max(0, i - WINDOW):i] + walk[i + 1:i + WINDOW + 1]
                if not ctx:
                    continue
                ctx = np.asarray(ctx)
                negs = rng.choice(n, size=ctx.size * NEGATIVES, p=noise)
                targets = np.concatenate([ctx, negs])
                labels = np.zeros(targets.size)
                labels[:ctx.size] = 1.0
                vc = w_in[center]
                vt = w_out[targets]
                s = 1.0 / (1.0 + np.exp(-(vt @ vc)))
                coef = (labels - s) * lr
                w_in[center] = vc + coef @ vt
                np.add.at(w_out, targets, coef[:, None] * vc)

    if isolated:
        w_in[isolated] = 0.0
        log.warning("node2vec: %d isolated node(s) got zero embeddings", len(isolated))
    return w_in


def save_embedding_cache(path, e_x):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"node2vec.E_X": {"shape": list(e_x.shape),
                                    "data": [float(v) for v in e_x.ravel()]}}, fh)
        fh.write("\n")


def load_embedding_cache(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "node2vec.E_X" not in doc:
        raise DataError(f"{path}: missing 'node2vec.E_X' entry")
    entry = doc["node2vec.E_X"]
    return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])


def cell_geo_features(grid, use_poi=True, use_sat=True):
    """Per-cell geographic feature matrix.

    Columns: min-max scaled center latitude and longitude, then log(1+count)
    for the ten POI categories (unless disabled), then auxiliary per-cell
    features as-is (unless disabled or absent).
    """
    lat, lon = grid.cell_centers()
    cols = []
    for v in (lat, lon):
        span = v.max() - v.min()
        cols.append((v - v.min()) / span if span > 0 else np.zeros_like(v))
    feats = [np.stack(cols, axis=1)]
    if use_poi:
        if (grid.poi < 0).any():
            raise DataError("cell_geo_features: negative POI count")
        feats.append(np.log1p(grid.poi))
    if use_sat and grid.sat is not None:
        feats.append(grid.sat)
    return np.concatenate(feats, axis=1)


def build_ste_x(e_x, times, spatial_fcn, temporal_fcn):
    """Road spatio-temporal embedding, shape (N_X, P+Q, D)."""
    spat = spatial_fcn(tensor(e_x))                            # (N_X, D)
    temp = temporal_fcn(tensor(temporal_onehots(times)))       # (T, D)
    n, d = spat.shape
    return add(reshape(spat, (n, 1, d)), temp)


def build_ste_z(geo, times, spatial_fcn, temporal_fcn):
    """Region spatio-temporal embedding, shape (N_Z, P+Q, D)."""
    spat = spatial_fcn(tensor(geo))                            # (N_Z, D)
    temp = temporal_fcn(tensor(temporal_onehots(times)))       # (T, D)
    n, d = spat.shape
    return add(reshape(spat, (n, 1, d)), temp)
