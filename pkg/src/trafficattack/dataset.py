"""Hourly network-wide flow data: ingestion, synthesis, windowing, scaling, splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateDataError,
    IngestionError,
    InsufficientDataError,
    SchemaError,
)

STEPS = 12  # input and output horizon, in hours
WINDOW = 2 * STEPS
HOUR = np.timedelta64(1, "h")
WEEK_HOURS = 168


@dataclass(frozen=True)
class FlowSeries:
    values: np.ndarray  # [T, N] vehicles/hour
    start_time: np.datetime64  # hour resolution
    sensor_ids: tuple[str, ...]

    step = HOUR

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != len(self.sensor_ids):
            raise ContractError("values must be [T, N] with one column per sensor id")
        if (self.values < 0).any():
            raise IngestionError("flows must be non-negative")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.n_steps) * HOUR


@dataclass(frozen=True)
class SensorNetwork:
    sensor_ids: tuple[str, ...]
    positions: np.ndarray  # [N, 2] km

    @property
    def pairwise_distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt((diff ** 2).sum(axis=-1))


@dataclass(frozen=True)
class WindowedDataset:
    inputs: np.ndarray  # [S, 12, N]
    targets: np.ndarray  # [S, 12, N]
    sample_times: np.ndarray  # datetime64[h], first input step of each window

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.inputs.shape[2]

    def subset(self, index) -> "WindowedDataset":
        index = np.asarray(index)
        return WindowedDataset(self.inputs[index], self.targets[index], self.sample_times[index])


@dataclass(frozen=True)
class Normalizer:
    """Scalar z-score transform shared by every sensor and timestep."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DegenerateDataError(f"normalizer sigma must be positive, got {self.sigma}")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mu) / self.sigma

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.sigma + self.mu


def fit_normalizer(inputs: np.ndarray) -> Normalizer:
    """Mean and population standard deviation over every entry of ``inputs``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.size == 0:
        raise ContractError("cannot fit a normalizer on an empty split")
    mu = float(inputs.mean())
    sigma = float(inputs.std())
    if sigma == 0.0:
        raise DegenerateDataError("inputs are constant; standard deviation is zero")
    return Normalizer(mu, sigma)


# -- CSV ---------------------------------------------------------------------


def _parse_hour(text: str) -> np.datetime64:
    try:
        return np.datetime64(text.strip(), "h")
    except ValueError:
        raise ValueError(f"bad timestamp {text!r}") from None


def load_sensors(path: str | Path) -> SensorNetwork:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["sensor_id", "x_km", "y_km"]:
        raise SchemaError(f"{path}: header must be 'sensor_id,x_km,y_km'")
    ids, pos = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise IngestionError(f"{path}: line {lineno} has {len(row)} fields, expected 3")
        try:
            pos.append((float(row[1]), float(row[2])))
        except ValueError:
            raise IngestionError(f"{path}: line {lineno} has a non-numeric coordinate") from None
        ids.append(row[0].strip())
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate sensor ids")
    return SensorNetwork(tuple(ids), np.array(pos, dtype=np.float64).reshape(-1, 2))


def load_csv(path: str | Path, sensors_path: str | Path | None = None) -> tuple[FlowSeries, SensorNetwork]:
    """Read a flow CSV and its sensor CSV (default: ``sensors.csv`` next to it).

    Row indices in error messages count data rows from 0 (the header is not a row).
    """
    path = Path(path)
    sensors_path = Path(sensors_path) if sensors_path else path.with_name("sensors.csv")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "time" or len(header) < 2:
            raise SchemaError(f"{path}: header must be 'time,<sensor_id>,...'")
        ids = tuple(h.strip() for h in header[1:])
        if len(set(ids)) != len(ids) or any(not s for s in ids):
            raise SchemaError(f"{path}: sensor ids in header must be unique and non-empty")
        times, values = [], []
        for row_idx, row in enumerate(reader):
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {row_idx} has {len(row)} fields, expected {len(header)}")
            try:
                times.append(_parse_hour(row[0]))
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_idx}: {exc}") from None
            parsed = []
            for col, cell in zip(ids, row[1:]):
                cell = cell.strip()
                try:
                    v = float(cell) if cell else float("nan")
                except ValueError:
                    v = float("nan")
                if not np.isfinite(v):
                    raise IngestionError(f"{path}: row {row_idx}, sensor {col}: missing or non-numeric value {cell!r}")
                if v < 0:
                    raise IngestionError(f"{path}: row {row_idx}, sensor {col}: negative flow {cell}")
                parsed.append(v)
            values.append(parsed)
    if not times:
        raise IngestionError(f"{path}: no data rows")
    t = np.array(times)
    gaps = np.nonzero(np.diff(t) != HOUR)[0]
    if gaps.size:
        raise IngestionError(f"{path}: row {gaps[0] + 1} is not one hour after the previous row")
    series = FlowSeries(np.array(values, dtype=np.float64), t[0], ids)

    network = load_sensors(sensors_path)
    if network.sensor_ids != ids:
        order = {s: i for i, s in enumerate(network.sensor_ids)}
        if set(order) != set(ids):
            raise SchemaError(f"{sensors_path}: sensor ids do not match {path}")
        network = SensorNetwork(ids, network.positions[[order[s] for s in ids]])
    return series, network


def write_csv(series: FlowSeries, network: SensorNetwork, path: str | Path,
              sensors_path: str | Path | None = None) -> None:
    path = Path(path)
    sensors_path = Path(sensors_path) if sensors_path else path.with_name("sensors.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *series.sensor_ids])
        for ts, row in zip(series.times, series.values):
            w.writerow([str(ts.astype("datetime64[s]")), *(repr(float(v)) for v in row)])
    with sensors_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "x_km", "y_km"])
        for sid, (x, y) in zip(network.sensor_ids, network.positions):
            w.writerow([sid, repr(float(x)), repr(float(y))])


# -- synthetic data ------------------------------------------------------------


def generate_synthetic(n_sensors: int, n_days: int, seed: int, *,
                       noise_scale: float = 0.1,
                       noise_persistence: float = 0.0,
                       spatial_scale_km: float = 5.0,
                       start: str = "2018-01-01T00") -> tuple[FlowSeries, SensorNetwork]:
    """Seeded desk-scale stand-in for a freeway detector network.

    flow = base * (1 + daily sinusoid + half-day harmonic) * weekday/weekend factor
           + base * noise_scale * noise, clipped at 0.

    The noise is Gaussian, AR(1) in time (``noise_persistence``) and correlated
    in space through an exponential kernel over sensor distance. The
    deterministic part depends on the hour index only through hour-of-day and
    day-of-week, so with ``noise_scale=0`` the series repeats every 168 hours
    exactly. The default start, 2018-01-01, is a Monday.
    """
    if n_sensors < 2:
        raise ConfigurationError("n_sensors must be at least 2")
    if n_days < 8:
        raise ConfigurationError("n_days must be at least 8")
    rng = np.random.default_rng(seed)
    n_steps = 24 * n_days
    positions = rng.uniform(0.0, 20.0, size=(n_sensors, 2))
    base = rng.uniform(400.0, 1600.0, size=n_sensors)
    amp_day = rng.uniform(0.35, 0.6, size=n_sensors)
    amp_half = rng.uniform(0.1, 0.25, size=n_sensors)
    phase = rng.uniform(12.0, 16.0, size=n_sensors)  # hour of the daily maximum
    weekend = rng.uniform(0.6, 0.8, size=n_sensors)

    hours = np.arange(24, dtype=np.float64)[:, None]
    daily = (1.0 + amp_day * np.cos(2 * np.pi * (hours - phase) / 24.0)
             + amp_half * np.cos(2 * np.pi * (hours - phase + 4.0) / 12.0))  # [24, N]
    dow = np.ones((7, n_sensors))
    dow[5:] = weekend
    idx = np.arange(n_steps)
    clean = base * daily[idx % 24] * dow[(idx // 24) % 7]

    burn = 200
    z = rng.standard_normal((n_steps + burn, n_sensors))
    net = SensorNetwork(tuple(f"S{i:03d}" for i in range(n_sensors)), positions)
    kernel = np.exp(-net.pairwise_distances / spatial_scale_km)
    chol = np.linalg.cholesky(kernel + 1e-9 * np.eye(n_sensors))
    shocks = z @ chol.T
    phi = noise_persistence
    noise = lfilter([np.sqrt(1.0 - phi ** 2)], [1.0, -phi], shocks, axis=0)[burn:]

    values = np.maximum(clean + noise_scale * base * noise, 0.0)
    series = FlowSeries(values, np.datetime64(start, "h"), net.sensor_ids)
    return series, net


# -- windows and splits --------------------------------------------------------


def make_windows(series: FlowSeries) -> WindowedDataset:
    """Stride-1 windows: 12 input hours followed by the next 12 hours."""
    n_steps = series.n_steps
    if n_steps < WINDOW:
        raise InsufficientDataError(f"need at least {WINDOW} timesteps, got {n_steps}")
    view = np.lib.stride_tricks.sliding_window_view(series.values, WINDOW, axis=0)  # [S, N, 24]
    view = np.moveaxis(view, 2, 1)
    count = n_steps - WINDOW + 1
    return WindowedDataset(
        inputs=np.ascontiguousarray(view[:, :STEPS, :]),
        targets=np.ascontiguousarray(view[:, STEPS:, :]),
        sample_times=series.times[:count],
    )


def drop_warmup(dataset: WindowedDataset, start_time: np.datetime64, hours: int) -> WindowedDataset:
    """Keep windows whose first predicted hour is at least ``hours`` after ``start_time``."""
    first_target = dataset.sample_times + STEPS * HOUR
    keep = (first_target - start_time) >= hours * HOUR
    return dataset.subset(np.nonzero(keep)[0])


def split_sizes(n: int, fractions=(0.70, 0.20, 0.10)) -> tuple[int, int, int]:
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or min(f) <= 0 or sum(f) > 1 + 1e-12:
        raise ConfigurationError(f"fractions must be three positive numbers summing to at most 1, got {fractions}")
    n_oracle = int(np.floor(n * f[0] + 0.5))
    n_attack = int(np.floor(n * f[1] + 0.5))
    if abs(sum(f) - 1.0) < 1e-9:
        n_hold = n - n_oracle - n_attack
    else:
        n_hold = min(int(np.floor(n * f[2] + 0.5)), n - n_oracle - n_attack)
    sizes = (n_oracle, n_attack, n_hold)
    if min(sizes) <= 0:
        raise ConfigurationError(f"split of {n} samples with fractions {fractions} leaves an empty part: {sizes}")
    return sizes


def split_indices(n: int, fractions=(0.70, 0.20, 0.10), seed: int = 0,
                  chronological: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_oracle, n_attack, n_hold = split_sizes(n, fractions)
    order = np.arange(n) if chronological else np.random.default_rng(seed).permutation(n)
    parts = (order[:n_oracle], order[n_oracle:n_oracle + n_attack],
             order[n_oracle + n_attack:n_oracle + n_attack + n_hold])
    return tuple(np.sort(p) for p in parts)


def split(dataset: WindowedDataset, fractions=(0.70, 0.20, 0.10), seed: int = 0,
          chronological: bool = False) -> tuple[WindowedDataset, WindowedDataset, WindowedDataset]:
    """Partition into (oracle, attack, holdout) splits.

    Oracle and attack sizes are rounded to the nearest integer; when the
    fractions sum to one the holdout takes the remainder.
    """
    parts = split_indices(len(dataset), fractions, seed, chronological)
    return tuple(dataset.subset(p) for p in parts)
