"""Speed series ingestion, synthetic generation, normalization, windowing.

The synthetic generator lays out a rectangular grid of bidirectional
links and plants spatial structure: links sharing a direction quadrant
move together, and links heading into the same destination cell move
together.  That gives the direction / positional graph elements a real
signal to exploit, standing in for the proprietary urban datasets.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from roadflow.errors import ConfigError, DataError
from roadflow.geometry import LinkSet, LinkVector, Point2, save_links

INTERVAL = np.timedelta64(5, "m")
STEPS_PER_DAY = 24 * 12


@dataclass
class SpeedSeries:
    """Uniform 5-minute speed observations, km/h, one column per link."""

    timestamps: np.ndarray  # datetime64[m], strictly increasing, 5-min steps
    values: np.ndarray  # (T_total, N)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.timestamps.shape[0]:
            raise DataError("values must be (T_total, N) aligned with timestamps")
        steps = np.diff(self.timestamps)
        bad = np.nonzero(steps != INTERVAL)[0]
        if bad.size:
            raise DataError(f"non-uniform spacing at row {bad[0] + 1} ({self.timestamps[bad[0] + 1]})")
        if not np.all(np.isfinite(self.values)):
            raise DataError("speed values contain NaN or inf")
        if np.any(self.values < 0):
            raise DataError("negative speed values")

    @property
    def n(self) -> int:
        return self.values.shape[1]

    def weekdays(self) -> np.ndarray:
        """Day of week per row, Monday=0."""
        days = self.timestamps.astype("datetime64[D]").astype(np.int64)
        return (days + 3) % 7  # 1970-01-01 was a Thursday

    def time_of_day(self) -> np.ndarray:
        """Slot index within the day, 0..287."""
        mins = self.timestamps.astype(np.int64)
        return (mins % (24 * 60)) // 5


@dataclass
class NormalizationStats:
    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise DataError(f"std must be positive, got {self.std}")


@dataclass
class WindowedDataset:
    """Aligned (history, target) windows plus row indices into the series."""

    history: np.ndarray  # (S, T_hist, N)
    target: np.ndarray  # (S, T_hor, N)
    target_rows: np.ndarray  # (S, T_hor) indices into the source series
    split: str

    def __len__(self) -> int:
        return self.history.shape[0]


@dataclass
class SyntheticSpec:
    """Knobs for the planted-structure grid generator."""

    grid_rows: int = 6
    grid_cols: int = 6
    min_link_length: float = 171.0
    max_link_length: float = 600.0
    direction_effect: float = 8.0
    positional_effect: float = 4.0
    daily_amplitude: float = 8.0
    noise_std: float = 4.0
    signal_correlation_minutes: float = 45.0
    base_speed: float = 40.0
    weeks: int = 4
    start: str = "2018-04-02"  # a Monday
    destination_cells: int = 2  # coarse grid is cells x cells
    seed: int = 0

    def __post_init__(self):
        for name in ("direction_effect", "positional_effect", "daily_amplitude", "noise_std"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.signal_correlation_minutes < 5:
            raise ConfigError("signal_correlation_minutes must cover at least one sample")


def load_speeds(path: str | Path, expected_n: int | None = None) -> SpeedSeries:
    """Read speeds CSV: header ``timestamp,link_0,...,link_{N-1}``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp":
            raise DataError(f"{path}: first column must be 'timestamp'")
        n = len(header) - 1
        if header[1:] != [f"link_{i}" for i in range(n)]:
            raise DataError(f"{path}: speed columns must be link_0..link_{n - 1}")
        if expected_n is not None and n != expected_n:
            raise DataError(f"{path}: {n} links in file, geometry has {expected_n}")
        stamps, rows = [], []
        for idx, row in enumerate(reader):
            if len(row) != n + 1:
                raise DataError(f"{path}: row {idx + 2} has {len(row)} fields, expected {n + 1}")
            try:
                stamps.append(np.datetime64(row[0], "m"))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}: row {idx + 2}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    return SpeedSeries(np.array(stamps), np.array(rows))


def save_speeds(series: SpeedSeries, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + [f"link_{i}" for i in range(series.n)])
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([np.datetime_as_string(ts, unit="m")] + [f"{v:.6f}" for v in row])


def _grid_links(spec: SyntheticSpec, rng: np.random.Generator) -> LinkSet:
    """Grid of nodes with one link per direction on every street segment."""
    # random but reproducible spacing per row/column gap
    col_gaps = rng.uniform(spec.min_link_length, spec.max_link_length, spec.grid_cols - 1)
    row_gaps = rng.uniform(spec.min_link_length, spec.max_link_length, spec.grid_rows - 1)
    xs = np.concatenate([[0.0], np.cumsum(col_gaps)])
    ys = np.concatenate([[0.0], np.cumsum(row_gaps)])
    links = []

    def add(p, q):
        links.append((p, q))
        links.append((q, p))

    for r in range(spec.grid_rows):
        for c in range(spec.grid_cols - 1):
            add((xs[c], ys[r]), (xs[c + 1], ys[r]))
    for c in range(spec.grid_cols):
        for r in range(spec.grid_rows - 1):
            add((xs[c], ys[r]), (xs[c], ys[r + 1]))
    return LinkSet(
        [
            LinkVector(i, Point2(*p), Point2(*q))
            for i, (p, q) in enumerate(links)
        ]
    )


def _smooth_signal(rng: np.random.Generator, t_total: int, corr_steps: int) -> np.ndarray:
    """Zero-mean, unit-std signal with the given correlation length in samples."""
    raw = rng.standard_normal(t_total + 6 * corr_steps)
    kern = np.exp(-0.5 * (np.arange(-3 * corr_steps, 3 * corr_steps + 1) / corr_steps) ** 2)
    kern /= np.linalg.norm(kern)
    sig = np.convolve(raw, kern, mode="same")[3 * corr_steps : 3 * corr_steps + t_total]
    sig -= sig.mean()
    std = sig.std()
    return sig / std if std > 0 else sig


def generate_synthetic(spec: SyntheticSpec) -> tuple[LinkSet, SpeedSeries]:
    """Grid links plus speeds with planted direction / destination structure."""
    rng = np.random.default_rng(spec.seed)
    links = _grid_links(spec, rng)
    n = len(links)
    t_total = spec.weeks * 7 * STEPS_PER_DAY
    start = np.datetime64(spec.start, "m")
    timestamps = start + np.arange(t_total) * INTERVAL

    tod = (timestamps.astype(np.int64) % (24 * 60)) / (24 * 60.0)
    daily = spec.daily_amplitude * np.sin(2 * np.pi * (tod - 0.25))

    # direction quadrant group signals
    angles = links.directions()
    quad = np.floor(angles / (np.pi / 2.0)).astype(int) % 4
    corr_steps = max(1, int(round(spec.signal_correlation_minutes / 5.0)))
    g_dir = np.stack([_smooth_signal(rng, t_total, corr_steps) for _ in range(4)])

    # destination-cell group signals
    ends = np.array([[ln.end.x, ln.end.y] for ln in links.links])
    cells = spec.destination_cells
    ex = np.clip((ends[:, 0] / (ends[:, 0].max() + 1e-9) * cells).astype(int), 0, cells - 1)
    ey = np.clip((ends[:, 1] / (ends[:, 1].max() + 1e-9) * cells).astype(int), 0, cells - 1)
    cell_id = ex * cells + ey
    g_pos = np.stack([_smooth_signal(rng, t_total, corr_steps) for _ in range(cells * cells)])

    noise = rng.standard_normal((t_total, n)) * spec.noise_std
    values = (
        spec.base_speed
        + daily[:, None]
        + spec.direction_effect * g_dir[quad].T
        + spec.positional_effect * g_pos[cell_id].T
        + noise
    )
    np.clip(values, 0.1, None, out=values)
    return links, SpeedSeries(timestamps, values)


def write_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> tuple[Path, Path]:
    """Generate and persist geometry CSV, speeds CSV, and a spec echo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    links, series = generate_synthetic(spec)
    geom = out_dir / "links.csv"
    speeds = out_dir / "speeds.csv"
    save_links(links, geom)
    save_speeds(series, speeds)
    (out_dir / "spec.json").write_text(json.dumps(asdict(spec), indent=2))
    return geom, speeds


def zscore(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (values - stats.mean) / stats.std


def inverse_zscore(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return values * stats.std + stats.mean


def compute_stats(values: np.ndarray) -> NormalizationStats:
    std = float(values.std())
    if std <= 0:
        raise DataError("constant series: z-score undefined")
    return NormalizationStats(mean=float(values.mean()), std=std)


def _windows_in_runs(rows: np.ndarray, length: int) -> list[np.ndarray]:
    """All length-``length`` index windows within contiguous 5-min runs."""
    out = []
    if rows.size == 0:
        return out
    breaks = np.nonzero(np.diff(rows) != 1)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks + 1, [rows.size]])
    for s, e in zip(starts, ends):
        run = rows[s:e]
        for i in range(run.size - length + 1):
            out.append(run[i : i + length])
    return out


def split_rows(
    series: SpeedSeries,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    exclude_weekends: bool = True,
) -> dict[str, np.ndarray]:
    """Row indices of the three time-ordered splits, weekends dropped."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {ratios}")
    keep = np.arange(series.values.shape[0])
    if exclude_weekends:
        keep = keep[series.weekdays() < 5]
    if keep.size == 0:
        raise DataError("no rows left after weekend exclusion")
    n_train = int(round(ratios[0] * keep.size))
    n_val = int(round(ratios[1] * keep.size))
    return {
        "train": keep[:n_train],
        "val": keep[n_train : n_train + n_val],
        "test": keep[n_train + n_val :],
    }


def split_and_window(
    series: SpeedSeries,
    t_hist: int,
    t_horizon: int,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    exclude_weekends: bool = True,
) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Time-ordered train/val/test windows, never crossing removed days.

    Weekend rows are dropped before splitting when requested; windows are
    built only inside runs of consecutive surviving rows, so none spans
    the seam left by an excluded day or a split boundary.
    """
    pieces = split_rows(series, ratios, exclude_weekends)
    length = t_hist + t_horizon
    n = series.n
    datasets = []
    for split, rows in pieces.items():
        windows = _windows_in_runs(rows, length)
        if not windows and split == "train":
            raise DataError(f"train split too short for {length}-step windows")
        idx = np.stack(windows) if windows else np.zeros((0, length), dtype=int)
        datasets.append(
            WindowedDataset(
                history=series.values[idx[:, :t_hist]].reshape(-1, t_hist, n),
                target=series.values[idx[:, t_hist:]].reshape(-1, t_horizon, n),
                target_rows=idx[:, t_hist:],
                split=split,
            )
        )
    return tuple(datasets)
