"""Training loop, metrics, baselines, ablations and stratified reporting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import backward, record
from .data import road_cell_distances, window
from .embeddings import temporal_onehots
from .errors import ConfigError, DataError
from .model import TrafficModel, mae_loss

log = logging.getLogger("gridcast")

EPS_MAPE_KMH = 1.0    # |target| floor below which MAPE terms are dropped


@dataclass
class WindowBatch:
    """Stacked arrays for a batch of forecasting windows."""

    x: np.ndarray                 # (B, P, N_X)
    z: np.ndarray | None          # (B, P, N_Z)
    y: np.ndarray                 # (B, Q, N_X) normalized targets
    y_raw: np.ndarray             # (B, Q, N_X) km/h targets
    y_missing: np.ndarray         # (B, Q, N_X) bool
    onehots: np.ndarray           # (B, P+Q, 31)


def make_batch(samples, need_z=True):
    if not samples:
        raise DataError("make_batch of zero samples")
    return WindowBatch(
        x=np.stack([s.x_hist for s in samples]),
        z=np.stack([s.z_hist for s in samples]) if need_z else None,
        y=np.stack([s.y for s in samples]),
        y_raw=np.stack([s.y_raw for s in samples]),
        y_missing=np.stack([s.y_missing for s in samples]),
        onehots=np.stack([temporal_onehots(s.times) for s in samples]),
    )


@dataclass
class MetricsReport:
    """Per-horizon and pooled error metrics in km/h."""

    horizons: list            # one dict per step: mae, rmse, mape_pct, count, mape_count
    avg: dict
    label: str = ""

    def to_dict(self):
        return {"label": self.label, "horizons": self.horizons, "avg": self.avg}

    def table(self, name="model"):
        return format_report_table([(name, self)])


def format_report_table(named_reports):
    """Aligned text table: one row per model, per-horizon MAE then pooled stats."""
    q = len(named_reports[0][1].horizons)
    headers = ["model"] + [f"{h}h MAE" for h in range(1, q + 1)] + \
              ["Avg MAE", "Avg RMSE", "Avg MAPE%"]
    rows = []
    for name, rep in named_reports:
        row = [name] + [f"{h['mae']:.3f}" for h in rep.horizons]
        row += [f"{rep.avg['mae']:.3f}", f"{rep.avg['rmse']:.3f}", f"{rep.avg['mape_pct']:.2f}"]
        rows.append(row)
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines)


def compute_metrics(preds_kmh, targets_kmh, exclude=None, eps_mape=EPS_MAPE_KMH, label=""):
    """MAE/RMSE/MAPE per horizon step plus pooled averages.

    ``exclude`` marks entries (e.g. imputed targets) left out of every metric;
    MAPE additionally drops entries with |target| below ``eps_mape``.
    """
    preds_kmh = np.asarray(preds_kmh, dtype=np.float64)
    targets_kmh = np.asarray(targets_kmh, dtype=np.float64)
    if preds_kmh.shape != targets_kmh.shape or preds_kmh.ndim != 3:
        raise DataError(
            f"compute_metrics expects matching (W, Q, N) arrays, got {preds_kmh.shape} vs {targets_kmh.shape}"
        )
    if exclude is None:
        exclude = np.zeros(preds_kmh.shape, dtype=bool)
    include = ~np.asarray(exclude, dtype=bool)

    def bucket(p, t, inc):
        if inc.sum() == 0:
            raise DataError("compute_metrics: every entry excluded")
        err = p[inc] - t[inc]
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt((err * err).mean()))
        mape_inc = inc & (np.abs(t) >= eps_mape)
        if mape_inc.sum() > 0:
            mape = float((np.abs(p[mape_inc] - t[mape_inc]) / np.abs(t[mape_inc])).mean() * 100.0)
        else:
            mape = float("nan")
        return {"mae": mae, "rmse": rmse, "mape_pct": mape,
                "count": int(inc.sum()), "mape_count": int(mape_inc.sum())}

    horizons = [bucket(preds_kmh[:, h], targets_kmh[:, h], include[:, h])
                for h in range(preds_kmh.shape[1])]
    avg = bucket(preds_kmh, targets_kmh, include)
    return MetricsReport(horizons, avg, label=label)


def predict_partition(model, dataset, partition, batch_size=64, threads=1):
    """Denormalized predictions with matching targets and exclusion mask."""
    cfg = model.config
    samples = window(dataset, partition, cfg.p, cfg.q)
    if not samples:
        raise DataError(f"partition {partition!r} has no {cfg.p + cfg.q}-step windows")
    preds_norm = model.predict_samples(samples, batch_size=batch_size, threads=threads)
    preds = dataset.norm.denorm_x(preds_norm)
    targets = np.stack([s.y_raw for s in samples])
    excluded = np.stack([s.y_missing for s in samples])
    return preds, targets, excluded


def evaluate(model, dataset, partition="test", batch_size=64, exclude_imputed=None,
             threads=1):
    """MetricsReport for one partition; imputed targets are excluded by default."""
    if exclude_imputed is None:
        exclude_imputed = model.config.exclude_imputed
    preds, targets, excluded = predict_partition(model, dataset, partition,
                                                 batch_size, threads)
    mask = excluded if exclude_imputed else None
    return compute_metrics(preds, targets, mask, label=f"{model.config.variant}:{partition}")


@dataclass
class TrainResult:
    history: list                 # (epoch, train_mae_norm, val_mae_kmh) tuples
    best_val_mae: float
    epochs_run: int
    stopped_early: bool


def _validation_mae(model, dataset, val_samples, batch_size=64):
    preds_norm = model.predict_samples(val_samples, batch_size=batch_size)
    preds = dataset.norm.denorm_x(preds_norm)
    targets = np.stack([s.y_raw for s in val_samples])
    include = ~np.stack([s.y_missing for s in val_samples]) \
        if model.config.exclude_imputed else np.ones(targets.shape, dtype=bool)
    if include.sum() == 0:
        raise DataError("validation windows have no usable target entries")
    return float(np.abs(preds[include] - targets[include]).mean())


def train(model, dataset):
    """Windowed mini-batch training with early stopping on validation MAE.

    Training windows are shuffled each epoch with the config seed; the batch
    loss is the mean window MAE on normalized targets.  History rows carry the
    normalized training loss and the denormalized validation MAE; the best
    validation parameters are restored before returning.
    """
    cfg = model.config
    samples = window(dataset, "train", cfg.p, cfg.q)
    if not samples:
        raise DataError("train partition has no windows")
    if cfg.max_train_windows is not None:
        samples = samples[:cfg.max_train_windows]
    val_samples = window(dataset, "val", cfg.p, cfg.q)
    rng = np.random.default_rng(cfg.seed)
    need_z = model.dynamic_region

    history = []
    best_val = math.inf
    best_state = model.store.snapshot()
    bad_epochs = 0
    stopped_early = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(samples))
        starts = range(0, len(samples), cfg.batch_size)
        if cfg.max_batches_per_epoch is not None:
            starts = list(starts)[:cfg.max_batches_per_epoch]
        loss_sum = 0.0
        loss_n = 0
        for lo in starts:
            chunk = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            batch = make_batch(chunk, need_z)
            with record():
                y_hat = model.run_window_batch(batch)
                loss = mae_loss(y_hat, batch.y)
                backward(loss, model.store)
            model.store.adam_step(cfg.learning_rate)
            loss_sum += loss.item() * len(chunk)
            loss_n += len(chunk)
        train_mae = loss_sum / loss_n
        if val_samples:
            val_mae = _validation_mae(model, dataset, val_samples)
        else:
            val_mae = train_mae   # degenerate fallback for overfit runs
        history.append((epoch, train_mae, val_mae))
        log.info("epoch %d: train_mae=%.5f val_mae=%.5f", epoch, train_mae, val_mae)
        if val_mae < best_val:
            best_val = val_mae
            best_state = model.store.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if cfg.target_train_mae is not None and train_mae < cfg.target_train_mae:
            break
        if bad_epochs >= cfg.patience:
            stopped_early = True
            break
    model.store.load_state(best_state)
    return TrainResult(history, best_val, len(history), stopped_early)


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "train_mae", "val_mae"))
        for epoch, tr, va in history:
            w.writerow((epoch, repr(float(tr)), repr(float(va))))


def ha_bucket_means(dataset):
    """(7, 24, N_X) training-partition mean speed per (weekday, hour, road).

    Empty buckets are NaN; callers fall back to the per-road training mean.
    """
    if dataset.train_end == 0:
        raise DataError("ha_bucket_means requires a split dataset")
    n_x = dataset.x.shape[1]
    sums = np.zeros((7, 24, n_x))
    counts = np.zeros((7, 24, 1))
    for t in range(dataset.train_end):
        ts = dataset.timestamps[t]
        sums[ts.weekday(), ts.hour] += dataset.x[t]
        counts[ts.weekday(), ts.hour] += 1.0
    with np.errstate(invalid="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1.0), np.nan)
    return means


def ha_baseline(dataset, p=12, q=3, exclude_imputed=True):
    """Historical-average baseline scored on the same test windows."""
    means = ha_bucket_means(dataset)
    fallback = dataset.x[:dataset.train_end].mean(axis=0)
    samples = window(dataset, "test", p, q)
    if not samples:
        raise DataError("test partition has no windows")
    preds = np.empty((len(samples), q, dataset.x.shape[1]))
    for i, s in enumerate(samples):
        for h in range(q):
            ts = s.times[p + h]
            row = means[ts.weekday(), ts.hour]
            preds[i, h] = np.where(np.isnan(row), fallback, row)
    targets = np.stack([s.y_raw for s in samples])
    mask = np.stack([s.y_missing for s in samples]) if exclude_imputed else None
    return compute_metrics(preds, targets, mask, label="ha:test")


def ablate(config, graph, grid, dataset, variant, e_x=None):
    """Train and test-evaluate one architecture variant.

    Returns (MetricsReport, TrainResult, TrafficModel)."""
    from .model import VARIANTS
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = replace(config, variant=variant)
    model = TrafficModel.build(cfg, graph, grid, dataset, e_x=e_x)
    result = train(model, dataset)
    report = evaluate(model, dataset, "test")
    return report, result, model


def road_poi_density(graph, grid, radius_m=500.0):
    """Mean total POI count over cells within ``radius_m`` of each road node."""
    d = road_cell_distances(graph, grid)
    totals = grid.poi.sum(axis=1)
    dens = np.zeros(graph.n_x)
    for i in range(graph.n_x):
        near = d[i] <= radius_m
        dens[i] = totals[near].mean() if near.any() else 0.0
    return dens


def stratified_report(preds_kmh, targets_kmh, exclude, graph, grid, top_frac=0.3):
    """Split roads into POI-dense and POI-sparse strata and score each.

    Strata take floor(N_X * top_frac) roads from the top and bottom of the
    density ranking; ties resolve by road order (sorted road_id).
    """
    if not (0.0 < top_frac < 0.5):
        raise DataError(f"top_frac must lie in (0, 0.5), got {top_frac}")
    n_x = graph.n_x
    n_strat = int(n_x * top_frac)
    if n_x < 4 or n_strat < 1:
        raise DataError(f"stratified_report needs at least 4 roads, got {n_x}")
    dens = road_poi_density(graph, grid)
    top = np.argsort(-dens, kind="stable")[:n_strat]
    bottom = np.argsort(dens, kind="stable")[:n_strat]
    out = {}
    for name, idx in (("poi_h", top), ("poi_l", bottom)):
        sel = np.sort(idx)
        mask = exclude[:, :, sel] if exclude is not None else None
        out[name] = compute_metrics(preds_kmh[:, :, sel], targets_kmh[:, :, sel],
                                    mask, label=name)
    out["density"] = dens
    out["poi_h_roads"] = [graph.road_ids[i] for i in np.sort(top)]
    out["poi_l_roads"] = [graph.road_ids[i] for i in np.sort(bottom)]
    return out
