"""Series loading, chronological splitting, scaling and sliding windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class SeriesFrame:
    timestamps: list[str]
    values: np.ndarray  # float32, file order

    def __post_init__(self):
        if len(self.timestamps) != len(self.values):
            raise DataError("timestamps and values differ in length")

    def __len__(self) -> int:
        return len(self.values)


def load_ett_csv(path: str | Path, column_name: str = "OT") -> SeriesFrame:
    """Read one numeric column from an ETT-style CSV (header row, first field = timestamp)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if column_name not in header:
            raise DataError(f"{path}: column {column_name!r} not found in header {header}")
        col = header.index(column_name)
        stamps: list[str] = []
        values: list[float] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values.append(float(row[col]))
            except (ValueError, IndexError):
                cell = row[col] if col < len(row) else "<missing>"
                raise DataError(f"{path}: row {lineno}: non-numeric value {cell!r} in column {column_name!r}") from None
            stamps.append(row[0])
    if not values:
        raise DataError(f"{path}: no data rows")
    return SeriesFrame(stamps, np.asarray(values, dtype=np.float32))


def synthetic_sine(length: int, noise: float, period: float = 24.0, seed: int = 0) -> SeriesFrame:
    """Noisy unit-amplitude sine used in place of the ETT file for tests and CI."""
    if length < 1:
        raise DataError("synthetic length must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    vals = np.sin(2 * np.pi * t / period) + noise * rng.standard_normal(length)
    return SeriesFrame([str(i) for i in t], vals.astype(np.float32))


def parse_synthetic_spec(spec: str, seed: int = 0) -> SeriesFrame:
    """Parse ``sine:length,noise[,period]``."""
    kind, _, args = spec.partition(":")
    if kind != "sine" or not args:
        raise DataError(f"bad synthetic spec {spec!r}; expected sine:length,noise[,period]")
    parts = args.split(",")
    try:
        length = int(parts[0])
        noise = float(parts[1]) if len(parts) > 1 else 0.0
        period = float(parts[2]) if len(parts) > 2 else 24.0
    except ValueError:
        raise DataError(f"bad synthetic spec {spec!r}") from None
    return synthetic_sine(length, noise, period, seed)


def chronological_split(series, ratios: tuple[int, int, int] = (3, 1, 1)):
    """Contiguous train/val/test split; the test part takes the remainder."""
    n = len(series)
    if n < sum(ratios):
        raise DataError(f"series of length {n} too short for a {ratios} split")
    total = sum(ratios)
    n_train = n * ratios[0] // total
    n_val = n * ratios[1] // total
    return series[:n_train], series[n_train : n_train + n_val], series[n_train + n_val :]


@dataclass
class Scaler:
    mean: float = 0.0
    std: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std).astype(np.float32)

    def invert(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) * self.std + self.mean).astype(np.float32)


def fit_scaler(train: np.ndarray, mode: str = "standard") -> Scaler:
    """Fit on the training split only. ``mode="center"`` subtracts the mean without rescaling."""
    train = np.asarray(train, dtype=np.float64)
    if train.size == 0:
        raise DataError("cannot fit a scaler on an empty series")
    if mode not in ("standard", "center"):
        raise DataError(f"unknown normalization mode {mode!r}")
    mean = float(train.mean())
    if mode == "center":
        return Scaler(mean, 1.0)
    std = float(train.std())
    if std == 0.0 or not math.isfinite(std):
        log.warning("training series has zero variance; using std=1")
        std = 1.0
    return Scaler(mean, std)


def apply_scaler(scaler: Scaler, series: np.ndarray) -> np.ndarray:
    return scaler.apply(series)


@dataclass
class WindowPair:
    input: np.ndarray
    target: np.ndarray


def window_count(length: int, n: int = 48, m: int = 24) -> int:
    return max(0, length - n - m + 1)


def build_windows(series: np.ndarray, n: int = 48, m: int = 24) -> list[WindowPair]:
    series = np.asarray(series, dtype=np.float32)
    if len(series) < n + m:
        raise DataError(f"series of length {len(series)} too short; need at least N+M={n + m} points")
    return [WindowPair(series[i : i + n], series[i + n : i + n + m]) for i in range(window_count(len(series), n, m))]


def window_arrays(series: np.ndarray, n: int = 48, m: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Stacked (inputs [W, n], targets [W, m]) for batching."""
    pairs = build_windows(series, n, m)
    return np.stack([p.input for p in pairs]), np.stack([p.target for p in pairs])


@dataclass
class DatasetSplits:
    scaler: Scaler
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def arrays(self, split: str, n: int, m: int) -> tuple[np.ndarray, np.ndarray]:
        return window_arrays(getattr(self, split), n, m)


def prepare(frame: SeriesFrame, mode: str = "standard") -> DatasetSplits:
    """Split 3:1:1, fit the scaler on train and apply that same scaler to every split."""
    train, val, test = chronological_split(frame.values)
    scaler = fit_scaler(train, mode)
    return DatasetSplits(scaler, scaler.apply(train), scaler.apply(val), scaler.apply(test))
