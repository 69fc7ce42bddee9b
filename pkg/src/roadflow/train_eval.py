"""Training loop, metrics, the historical-average baseline, and studies."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from roadflow.data import (
    NormalizationStats,
    SpeedSeries,
    WindowedDataset,
    compute_stats,
    inverse_zscore,
    zscore,
)
from roadflow.errors import ConfigError, NumericError, ShapeError
from roadflow.graphs import GraphElementSet
from roadflow.model import Forecaster, ModelConfig
from roadflow.tensor import (
    Tensor,
    absolute_error,
    adam_step,
    save_checkpoint,
    squared_error,
    zero_grads,
)

MAPE_FLOOR = 1.0  # km/h; slower ground-truth entries are excluded from MAPE
DEFAULT_HORIZON_STEPS = (6, 9, 12)  # 30 / 45 / 60 minutes at 5-min sampling


@dataclass
class MetricReport:
    """Aggregate and per-horizon-step MAE / MAPE / RMSE, km/h units."""

    mae: float
    mape: float
    rmse: float
    per_step: dict[int, dict[str, float]]
    label: str = ""

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "mae": self.mae,
            "mape": self.mape,
            "rmse": self.rmse,
            "per_step": {str(k): v for k, v in self.per_step.items()},
        }


def compute_metrics(
    pred: np.ndarray,
    truth: np.ndarray,
    horizon_steps: tuple[int, ...] = DEFAULT_HORIZON_STEPS,
    label: str = "",
) -> MetricReport:
    """Metrics over (S, T, N) arrays of de-normalized speeds.

    ``horizon_steps`` are 1-based offsets into the horizon axis.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")

    def _one(p, y):
        err = p - y
        mae = float(np.abs(err).mean())
        rmse = float(np.sqrt(np.square(err).mean()))
        mask = y > MAPE_FLOOR
        mape = float((np.abs(err[mask]) / y[mask]).mean() * 100.0) if mask.any() else 0.0
        return {"mae": mae, "mape": mape, "rmse": rmse}

    agg = _one(pred, truth)
    per_step = {}
    for step in horizon_steps:
        if not 1 <= step <= pred.shape[1]:
            raise ShapeError(f"horizon step {step} outside 1..{pred.shape[1]}")
        per_step[step] = _one(pred[:, step - 1], truth[:, step - 1])
    return MetricReport(agg["mae"], agg["mape"], agg["rmse"], per_step, label=label)


def historical_average(
    series: SpeedSeries,
    train_rows: np.ndarray,
    dataset: WindowedDataset,
) -> np.ndarray:
    """Weekly-pattern baseline: mean speed per (weekday, time-of-day, link).

    Keys never seen in training fall back to the per-link training mean.
    Predictions depend only on the target instant, so every horizon step
    pointing at the same instant gets the same value.
    """
    weekdays = series.weekdays()
    tod = series.time_of_day()
    n = series.n
    sums = np.zeros((7, 288, n))
    counts = np.zeros((7, 288))
    for r in train_rows:
        sums[weekdays[r], tod[r]] += series.values[r]
        counts[weekdays[r], tod[r]] += 1
    fallback = series.values[train_rows].mean(axis=0)
    means = np.where(counts[..., None] > 0, sums / np.maximum(counts[..., None], 1), fallback)

    rows = dataset.target_rows
    return means[weekdays[rows], tod[rows]]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    loss: str = "mae"  # mae | mse
    max_batches_per_epoch: int | None = None
    seed: int = 0


@dataclass
class TrainState:
    """Outcome of one training run."""

    epochs_run: int
    best_val_mae: float
    history: list[dict] = field(default_factory=list)
    checkpoint_dir: str | None = None
    config_echo: dict = field(default_factory=dict)


def _forward_batches(model: Forecaster, x: np.ndarray, batch: int) -> np.ndarray:
    outs = []
    for i in range(0, x.shape[0], batch):
        xb = Tensor(x[i : i + batch, :, :, None])
        outs.append(model(xb).data[..., 0])
    return np.concatenate(outs, axis=0)


def predict(model: Forecaster, dataset: WindowedDataset, stats: NormalizationStats, batch: int = 64) -> np.ndarray:
    """De-normalized predictions (S, T, N) for a windowed dataset."""
    xn = zscore(dataset.history, stats)
    return inverse_zscore(_forward_batches(model, xn, batch), stats)


def train(
    model: Forecaster,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    stats: NormalizationStats,
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
) -> TrainState:
    """Mini-batch Adam with early stopping on validation MAE (km/h)."""
    loss_fn = {"mae": absolute_error, "mse": squared_error}.get(config.loss)
    if loss_fn is None:
        raise ConfigError(f"unknown loss {config.loss!r}")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    x_train = zscore(train_set.history, stats)
    y_train = zscore(train_set.target, stats)

    best_val = np.inf
    best_snapshot = None
    bad_epochs = 0
    history = []
    epochs_run = 0
    for epoch in range(config.epochs):
        epochs_run = epoch + 1
        order = rng.permutation(x_train.shape[0])
        if config.max_batches_per_epoch is not None:
            order = order[: config.max_batches_per_epoch * config.batch_size]
        epoch_loss = 0.0
        n_batches = 0
        for i in range(0, order.size, config.batch_size):
            idx = order[i : i + config.batch_size]
            xb = Tensor(x_train[idx][..., None])
            yb = Tensor(y_train[idx][..., None])
            loss = loss_fn(model(xb), yb)
            if not np.isfinite(loss.data):
                raise NumericError(f"loss diverged at epoch {epoch}, batch {n_batches}")
            zero_grads(params)
            loss.backward()
            adam_step(params, lr=config.lr)
            epoch_loss += float(loss.data)
            n_batches += 1
        val_pred = predict(model, val_set, stats)
        val_mae = float(np.abs(val_pred - val_set.target).mean())
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_mae": val_mae})
        if val_mae < best_val:
            best_val = val_mae
            best_snapshot = [p.tensor.data.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break
    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.tensor.data = snap
    if checkpoint_dir is not None:
        save_checkpoint(params, checkpoint_dir, step=epochs_run)
    return TrainState(
        epochs_run=epochs_run,
        best_val_mae=best_val,
        history=history,
        checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
    )


def evaluate(
    model: Forecaster,
    test_set: WindowedDataset,
    stats: NormalizationStats,
    horizon_steps: tuple[int, ...] = DEFAULT_HORIZON_STEPS,
    label: str = "",
) -> MetricReport:
    pred = predict(model, test_set, stats)
    return compute_metrics(pred, test_set.target, horizon_steps, label=label)


def run_experiment(
    elements: GraphElementSet,
    train_set: WindowedDataset,
    val_set: WindowedDataset,
    test_set: WindowedDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    label: str = "",
) -> tuple[MetricReport, TrainState, Forecaster]:
    """Train one model and evaluate on the test split."""
    model = Forecaster(elements, model_config)
    stats = compute_stats(train_set.history)
    state = train(model, train_set, val_set, stats, train_config, checkpoint_dir)
    report = evaluate(model, test_set, stats, label=label)
    return report, state, model


ABLATION_GROUPS = ("distance", "direction_hybrid", "positional_hybrid", "distance_partitioned")


def run_ablation(
    elements: GraphElementSet,
    splits,
    model_config: ModelConfig,
    train_config: TrainConfig,
    removals: tuple[str, ...] = ABLATION_GROUPS,
    seeds: tuple[int, ...] = (0,),
) -> list[MetricReport]:
    """Retrain with each element group removed; first row removes nothing."""
    if model_config.spatial_block_kind == "single":
        raise ConfigError("ablation needs a parallel or stacked block")
    train_set, val_set, test_set = splits
    reports = []
    for removed in (None,) + tuple(removals):
        groups = tuple(g for g in model_config.enabled_groups if g != removed)
        if not groups:
            raise ConfigError(f"removing {removed!r} leaves no groups")
        maes, mapes, rmses = [], [], []
        for seed in seeds:
            cfg = ModelConfig(**{**_cfg_dict(model_config), "enabled_groups": groups, "seed": seed})
            tc = TrainConfig(**{**vars(train_config), "seed": seed})
            report, _, _ = run_experiment(elements, train_set, val_set, test_set, cfg, tc)
            maes.append(report.mae)
            mapes.append(report.mape)
            rmses.append(report.rmse)
        reports.append(
            MetricReport(
                mae=float(np.mean(maes)),
                mape=float(np.mean(mapes)),
                rmse=float(np.mean(rmses)),
                per_step={},
                label=f"removed={removed or 'None'}",
            )
        )
    return reports


def run_khop_study(
    elements: GraphElementSet,
    splits,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k_values: tuple[int, ...] = (1, 2, 3),
    seeds: tuple[int, ...] = (0,),
) -> list[MetricReport]:
    """Distance-only Chebyshev models of increasing order K."""
    train_set, val_set, test_set = splits
    reports = []
    for k in k_values:
        if k < 1:
            raise ConfigError("K must be >= 1")
        rmses, maes, mapes = [], [], []
        for seed in seeds:
            cfg = ModelConfig(
                **{**_cfg_dict(model_config), "use_cheb": True, "cheb_k": k, "seed": seed}
            )
            tc = TrainConfig(**{**vars(train_config), "seed": seed})
            report, _, _ = run_experiment(elements, train_set, val_set, test_set, cfg, tc)
            rmses.append(report.rmse)
            maes.append(report.mae)
            mapes.append(report.mape)
        reports.append(
            MetricReport(
                mae=float(np.mean(maes)),
                mape=float(np.mean(mapes)),
                rmse=float(np.mean(rmses)),
                per_step={},
                label=f"chebnet_K={k}",
            )
        )
    return reports


def _cfg_dict(config: ModelConfig) -> dict:
    from dataclasses import asdict

    return asdict(config)


def save_reports(reports: list[MetricReport], path: str | Path) -> None:
    """JSON list plus a long-format CSV next to it."""
    path = Path(path)
    path.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    csv_path = path.with_suffix(".csv")
    lines = ["label,scope,metric,value"]
    for r in reports:
        for metric, value in (("mae", r.mae), ("mape", r.mape), ("rmse", r.rmse)):
            lines.append(f"{r.label},aggregate,{metric},{value}")
        for step, metrics in r.per_step.items():
            for metric, value in metrics.items():
                lines.append(f"{r.label},step_{step},{metric},{value}")
    csv_path.write_text("\n".join(lines) + "\n")
