"""Hourly load data: CSV ingest, cleaning, standardization, windowing, splits
and a seeded synthetic generator that writes the same CSV format."""

from __future__ import annotations

import datetime as dt
import io
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (ConfigError, DataQualityError, EmptyDatasetError,
                     IngestError, UsageError)

SCHEMA = (
    "timestamp",
    "year", "quarter", "month", "week_of_year", "day_of_year",
    "state_holiday", "hour_of_day", "day_of_week", "day_type",
    "temperature", "dew_point", "relative_humidity", "wind_speed", "visibility",
    "precipitation",
    "daily_peak", "hourly_demand",
)
REQUIRED = ("timestamp", "hourly_demand")
CALENDAR = ("year", "quarter", "month", "week_of_year", "day_of_year",
            "state_holiday", "hour_of_day", "day_of_week", "day_type")
WEATHER = ("temperature", "dew_point", "relative_humidity", "wind_speed", "visibility")
TARGET = "hourly_demand"

DEFAULT_FEATURES = (
    "temperature", "dew_point", "relative_humidity", "wind_speed", "visibility",
    "hour_sin", "hour_cos", "dow_sin", "dow_cos", "month_sin", "month_cos",
    "hourly_demand",
)

MAX_MISSING_FRACTION = 0.5


# ----------------------------------------------------------------------
# Ingest
# ----------------------------------------------------------------------


def load_csv(path) -> pd.DataFrame:
    """Parse a load CSV. Empty cells become NaN; everything else must parse.

    Column order is free but names must come from :data:`SCHEMA`. Rows are
    reported by file line number (the header is line 1).
    """
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    unknown = [c for c in raw.columns if c not in SCHEMA]
    if unknown:
        raise IngestError("unknown column", column=unknown[0])
    for col in REQUIRED:
        if col not in raw.columns:
            raise IngestError("required column missing", column=col)

    out = {}
    cells = raw["timestamp"].str.strip()
    ts = pd.to_datetime(cells, format="ISO8601", errors="coerce")
    bad = np.flatnonzero(ts.isna().to_numpy())
    if len(bad):
        raise IngestError("unparseable timestamp", row=int(bad[0]) + 2, column="timestamp")
    out["timestamp"] = ts
    for col in SCHEMA[1:]:
        if col not in raw.columns:
            continue
        out[col] = _parse_floats(raw[col], col)
    return pd.DataFrame(out)


def _parse_floats(cells: pd.Series, column: str) -> np.ndarray:
    # python float() round-trips repr() exactly; pandas' fast parser does not
    values = np.empty(len(cells))
    for i, cell in enumerate(cells):
        cell = cell.strip()
        if not cell:
            values[i] = np.nan
            continue
        try:
            values[i] = float(cell)
        except ValueError:
            raise IngestError("unparseable number", row=i + 2, column=column) from None
    return values


def write_csv(df: pd.DataFrame, path) -> None:
    """Write records in the ingest format (atomic replace)."""
    frame = df.copy()
    frame["timestamp"] = frame["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%S")
    for col in CALENDAR:
        if col in frame.columns:
            frame[col] = frame[col].round().astype("Int64")
    cols = [c for c in SCHEMA if c in frame.columns]
    atomic_write_text(path, frame[cols].to_csv(index=False, lineterminator="\n"))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_npz(path, arrays) -> None:
    """``np.savez`` equivalent with fixed zip timestamps (byte-reproducible), atomic."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name, a in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())
    os.replace(tmp, path)


# ----------------------------------------------------------------------
# Cleaning
# ----------------------------------------------------------------------


def calendar_fields(ts: pd.Series) -> pd.DataFrame:
    ts = pd.Series(pd.to_datetime(ts)).reset_index(drop=True)
    holiday = ((ts.dt.month == 1) & (ts.dt.day == 1)) \
        | ((ts.dt.month == 7) & (ts.dt.day == 1)) \
        | ((ts.dt.month == 12) & (ts.dt.day == 25))
    weekend = ts.dt.dayofweek >= 5
    day_type = np.where(holiday, 2, np.where(weekend, 1, 0))
    return pd.DataFrame({
        "year": ts.dt.year.astype(float),
        "quarter": ts.dt.quarter.astype(float),
        "month": ts.dt.month.astype(float),
        "week_of_year": ts.dt.isocalendar().week.astype(float).to_numpy(),
        "day_of_year": ts.dt.dayofyear.astype(float),
        "state_holiday": holiday.astype(float),
        "hour_of_day": ts.dt.hour.astype(float),
        "day_of_week": ts.dt.dayofweek.astype(float),
        "day_type": day_type.astype(float),
    })


def clean(records: pd.DataFrame) -> pd.DataFrame:
    """Drop precipitation, fill weather gaps, drop rows without demand.

    Weather columns are linearly interpolated between valid neighbours and
    held at the nearest valid value at either end. Missing calendar fields
    are recomputed from the timestamp. Hour gaps left by dropped rows are
    visible through :func:`contiguous_segments`.
    """
    df = records.drop(columns=["precipitation"], errors="ignore")
    df = df.sort_values("timestamp", kind="stable")
    df = df.drop_duplicates("timestamp", keep="first").reset_index(drop=True)

    for col in df.columns:
        if col == "timestamp":
            continue
        frac = float(df[col].isna().mean()) if len(df) else 0.0
        if frac > MAX_MISSING_FRACTION:
            raise DataQualityError(f"column {col!r} is {frac:.0%} missing")

    for col in WEATHER:
        if col in df.columns and df[col].isna().any():
            df[col] = df[col].interpolate(method="linear", limit_direction="both")

    present = [c for c in CALENDAR if c in df.columns]
    if present and df[present].isna().any().any():
        derived = calendar_fields(df["timestamp"])
        for col in present:
            df[col] = df[col].fillna(derived[col])

    df = df[df[TARGET].notna()].reset_index(drop=True)
    if (df[TARGET] < 0).any():
        row = int(np.flatnonzero((df[TARGET] < 0).to_numpy())[0])
        raise DataQualityError(f"negative hourly demand at {df['timestamp'].iloc[row]}")
    return df


def contiguous_segments(records: pd.DataFrame) -> List[Tuple[int, int]]:
    """Half-open row ranges over which timestamps advance by exactly one hour."""
    n = len(records)
    if n == 0:
        return []
    steps = records["timestamp"].diff().to_numpy()[1:]
    breaks = np.flatnonzero(steps != np.timedelta64(1, "h")) + 1
    edges = [0, *breaks.tolist(), n]
    return list(zip(edges[:-1], edges[1:]))


# ----------------------------------------------------------------------
# Features and scaling
# ----------------------------------------------------------------------

_CYCLIC = {
    "hour": (lambda ts: ts.dt.hour, 24.0),
    "dow": (lambda ts: ts.dt.dayofweek, 7.0),
    "month": (lambda ts: ts.dt.month - 1, 12.0),
}


def feature_matrix(records: pd.DataFrame, columns: Sequence[str]) -> np.ndarray:
    """Raw (unscaled) values of ``columns``; ``*_sin``/``*_cos`` are derived
    cyclic encodings of hour, day-of-week and month."""
    ts = records["timestamp"]
    out = np.empty((len(records), len(columns)))
    for j, col in enumerate(columns):
        stem, _, kind = col.rpartition("_")
        if kind in ("sin", "cos") and stem in _CYCLIC:
            get, period = _CYCLIC[stem]
            angle = 2 * np.pi * get(ts).to_numpy(dtype=float) / period
            out[:, j] = np.sin(angle) if kind == "sin" else np.cos(angle)
        elif col in records.columns and col != "timestamp":
            out[:, j] = records[col].to_numpy(dtype=float)
        else:
            raise ConfigError(f"unknown or unavailable feature {col!r}")
    return out


@dataclass(frozen=True)
class ScalerState:
    columns: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def index(self, column: str) -> int:
        return self.columns.index(column)

    def transform(self, values: np.ndarray, columns: Sequence[str]) -> np.ndarray:
        idx = [self.index(c) for c in columns]
        return (values - self.mean[idx]) / self.std[idx]

    def inverse_transform(self, values: np.ndarray, columns: Sequence[str]) -> np.ndarray:
        idx = [self.index(c) for c in columns]
        return values * self.std[idx] + self.mean[idx]

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ScalerState":
        return cls(tuple(d["columns"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))

    def __eq__(self, other):
        return (isinstance(other, ScalerState) and self.columns == other.columns
                and np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std))


def fit_scaler(train: pd.DataFrame, features: Sequence[str] = DEFAULT_FEATURES) -> ScalerState:
    """Population mean/std per column over the training rows only.

    The demand target is always included. Zero-variance columns get std 1.
    """
    if len(train) == 0:
        raise UsageError("cannot fit a scaler on an empty slice")
    columns = tuple(features) + (() if TARGET in features else (TARGET,))
    values = feature_matrix(train, columns)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std[std == 0] = 1.0
    return ScalerState(columns, mean, std)


# ----------------------------------------------------------------------
# Windowing
# ----------------------------------------------------------------------


@dataclass
class WindowedDataset:
    inputs: np.ndarray          # (n, lookback, F), standardized
    targets: np.ndarray         # (n, horizon), standardized demand
    row_index: np.ndarray       # row of the first target hour in the source frame
    timestamps: np.ndarray      # timestamp of the first target hour
    target_mean: float
    target_std: float

    def __len__(self):
        return len(self.inputs)

    def inverse_target(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.target_std + self.target_mean

    def concat(self, other: "WindowedDataset") -> "WindowedDataset":
        """Stack two datasets windowed with the same scaler. Row indices of
        ``other`` are kept as-is, so they refer to ``other``'s source frame."""
        return WindowedDataset(
            np.concatenate([self.inputs, other.inputs]),
            np.concatenate([self.targets, other.targets]),
            np.concatenate([self.row_index, other.row_index]),
            np.concatenate([self.timestamps, other.timestamps]),
            self.target_mean, self.target_std,
        )


def window_count(length: int, lookback: int, horizon: int) -> int:
    return max(0, length - lookback - horizon + 1)


def make_windows(records: pd.DataFrame, scaler: ScalerState,
                 features: Sequence[str] = DEFAULT_FEATURES,
                 lookback: int = 3, horizon: int = 24) -> WindowedDataset:
    """Stride-1 windows: inputs are hours [t-lookback, t), targets [t, t+horizon).

    Windows never span a break in the hourly timestamp sequence.
    """
    x = scaler.transform(feature_matrix(records, features), features)
    y = scaler.transform(records[TARGET].to_numpy(dtype=float)[:, None], [TARGET])[:, 0]
    ts = records["timestamp"].to_numpy()
    starts = []
    for a, b in contiguous_segments(records):
        if window_count(b - a, lookback, horizon):
            starts.append(np.arange(a + lookback, b - horizon + 1))
    if not starts:
        raise EmptyDatasetError(
            f"no segment holds lookback+horizon = {lookback + horizon} contiguous hours"
        )
    starts = np.concatenate(starts)
    in_idx = starts[:, None] + np.arange(-lookback, 0)
    out_idx = starts[:, None] + np.arange(horizon)
    t = scaler.index(TARGET)
    return WindowedDataset(
        inputs=x[in_idx],
        targets=y[out_idx],
        row_index=starts,
        timestamps=ts[starts],
        target_mean=float(scaler.mean[t]),
        target_std=float(scaler.std[t]),
    )


# ----------------------------------------------------------------------
# Splitting
# ----------------------------------------------------------------------


def _as_date(value) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    return dt.date.fromisoformat(str(value))


@dataclass(frozen=True)
class SplitSpec:
    """Rows dated on or before ``train_end`` are train+validation (the last
    ``val_fraction`` of them validation); rows after it up to ``test_end``
    inclusive are test."""

    train_end: dt.date
    test_end: dt.date
    val_fraction: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "train_end", _as_date(self.train_end))
        object.__setattr__(self, "test_end", _as_date(self.test_end))
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie strictly between 0 and 1")
        if not self.train_end < self.test_end:
            raise ConfigError("train_end must precede test_end")

    @classmethod
    def auto(cls, records: pd.DataFrame, train_fraction: float = 0.75,
             val_fraction: float = 0.25) -> "SplitSpec":
        """Date-aligned split putting roughly ``train_fraction`` of rows before the cut."""
        if len(records) == 0:
            raise ConfigError("cannot derive a split from no records")
        ts = records["timestamp"]
        cut = ts.iloc[max(0, int(len(ts) * train_fraction) - 1)]
        return cls(cut.date(), ts.iloc[-1].date(), val_fraction)

    def to_dict(self) -> dict:
        return {"train_end": self.train_end.isoformat(), "test_end": self.test_end.isoformat(),
                "val_fraction": self.val_fraction}


PAPER_SPLIT = SplitSpec(dt.date(2020, 12, 31), dt.date(2023, 7, 14), 0.25)


def split(records: pd.DataFrame, spec: SplitSpec):
    ts = records["timestamp"]
    train_cut = pd.Timestamp(spec.train_end) + pd.Timedelta(days=1)
    test_cut = pd.Timestamp(spec.test_end) + pd.Timedelta(days=1)
    head = records[ts < train_cut]
    test = records[(ts >= train_cut) & (ts < test_cut)]
    n_val = int(np.floor(len(head) * spec.val_fraction + 0.5))
    train, val = head.iloc[:len(head) - n_val], head.iloc[len(head) - n_val:]
    for name, part in (("train", train), ("validation", val), ("test", test)):
        if len(part) == 0:
            raise ConfigError(f"{name} partition is empty under {spec}")
    return (train.reset_index(drop=True), val.reset_index(drop=True),
            test.reset_index(drop=True))


# ----------------------------------------------------------------------
# Synthetic data
# ----------------------------------------------------------------------

SYNTH_START = "2017-01-01T00:00:00"


def noiseless_demand(timestamps, temperature) -> np.ndarray:
    """Closed-form demand (MW) the generator adds noise to."""
    ts = pd.Series(pd.to_datetime(timestamps)).reset_index(drop=True)
    hour = ts.dt.hour.to_numpy(dtype=float)
    dow = ts.dt.dayofweek.to_numpy(dtype=float)
    temp = np.asarray(temperature, dtype=float)
    daily = 180.0 * np.sin(2 * np.pi * (hour - 8.0) / 24.0)
    weekly = 60.0 * np.cos(2 * np.pi * (dow + hour / 24.0) / 7.0)
    thermal = 9.0 * np.abs(temp - 18.0)
    return 1100.0 + daily + weekly + thermal


def _ar1(rng, n, phi, sigma):
    eps = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + eps[i]
        out[i] = acc
    return out


def generate_synthetic(hours: int, seed: int, noise: float = 1.0,
                       start: str = SYNTH_START) -> pd.DataFrame:
    """Seeded hourly records with every schema column populated.

    ``noise`` scales all stochastic terms (weather perturbations and demand
    noise); with ``noise=0`` demand equals :func:`noiseless_demand` exactly.
    Precipitation is mostly missing, like the real feed.
    """
    if hours < 48:
        raise ConfigError("synthetic series needs at least 48 hours")
    rng = np.random.default_rng(seed)
    ts = pd.Series(pd.date_range(start, periods=hours, freq="h"))
    doy = ts.dt.dayofyear.to_numpy(dtype=float)
    hour = ts.dt.hour.to_numpy(dtype=float)

    temp = (6.0 - 14.0 * np.cos(2 * np.pi * (doy - 15.0) / 365.25)
            + 4.0 * np.sin(2 * np.pi * (hour - 9.0) / 24.0)
            + noise * _ar1(rng, hours, 0.95, 0.5))
    dew = temp - 4.0 + noise * _ar1(rng, hours, 0.9, 0.4)
    rh = np.clip(100.0 - 5.0 * (temp - dew), 5.0, 100.0)
    wind = np.abs(12.0 + 3.0 * np.sin(2 * np.pi * hour / 24.0) + noise * _ar1(rng, hours, 0.9, 1.0))
    vis = np.clip(20.0 + noise * _ar1(rng, hours, 0.95, 0.6), 0.5, 25.0)
    precip = rng.exponential(1.0, hours)
    precip[rng.random(hours) < 0.8] = np.nan

    demand = noiseless_demand(ts, temp) + noise * rng.normal(0.0, 15.0, hours)
    demand = np.maximum(demand, 0.0)
    day = ts.dt.normalize()
    peak = pd.Series(demand).groupby(day.to_numpy()).transform("max").to_numpy()

    df = pd.DataFrame({"timestamp": ts})
    df = pd.concat([df, calendar_fields(ts)], axis=1)
    df["temperature"] = temp
    df["dew_point"] = dew
    df["relative_humidity"] = rh
    df["wind_speed"] = wind
    df["visibility"] = vis
    df["precipitation"] = precip
    df["daily_peak"] = peak
    df["hourly_demand"] = demand
    return df[list(SCHEMA)]


# ----------------------------------------------------------------------
# Convenience
# ----------------------------------------------------------------------


@dataclass
class PreparedData:
    """Windowed train/val/test partitions plus the scaler that produced them.

    Test windows are reached through :meth:`take_test`, which counts reads so
    callers can check that tuning never looked at them.
    """

    train: WindowedDataset
    val: WindowedDataset
    _test: WindowedDataset
    scaler: ScalerState
    features: Tuple[str, ...]
    split: SplitSpec
    test_reads: int = 0

    def take_test(self) -> WindowedDataset:
        self.test_reads += 1
        return self._test

    @property
    def feature_count(self) -> int:
        return len(self.features)


def prepare(records: pd.DataFrame, spec: Optional[SplitSpec] = None,
            features: Iterable[str] = DEFAULT_FEATURES,
            lookback: int = 3, horizon: int = 24) -> PreparedData:
    """clean -> split -> fit scaler on train -> window each partition."""
    features = tuple(features)
    cleaned = clean(records)
    spec = spec or SplitSpec.auto(cleaned)
    train, val, test = split(cleaned, spec)
    scaler = fit_scaler(train, features)
    win = [make_windows(part, scaler, features, lookback, horizon) for part in (train, val, test)]
    return PreparedData(win[0], win[1], win[2], scaler, features, spec)
