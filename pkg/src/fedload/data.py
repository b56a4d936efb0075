"""Smart-meter data: synthetic generation, CSV I/O, windowing, partitioning.

Hourly household series carry the aggregate load, outdoor temperature,
relative humidity and twelve sub-metered appliance loads (kW). They are cut
into midnight-aligned 24-hour windows, min-max normalized with statistics
fitted on training windows only, and dealt to federated clients either
uniformly at random or with one client collecting the windows in which
appliances are mostly off.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import rng

log = logging.getLogger(__name__)

APPLIANCES = (
    "ac", "car", "furnace", "refrigerator", "poolpump", "bathroom",
    "kitchen", "livingroom", "bedroom", "garage", "office", "lights_plugs",
)
INPUT_COLUMNS = ("total", "temp", "humidity")
CSV_COLUMNS = ("timestamp",) + INPUT_COLUMNS + APPLIANCES
OFF_THRESHOLD_KW = 0.01
HOUR = np.timedelta64(1, "h")


class SchemaError(ValueError):
    """A CSV file or a set of runs does not have the expected columns."""


class RowError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class HourlyRecord(NamedTuple):
    timestamp: datetime
    total_load: float
    temperature: float
    humidity: float
    appliance_loads: tuple[float, ...]


@dataclass
class MeterData:
    """Columnar hourly series for one household."""

    timestamps: np.ndarray          # datetime64[h]
    total: np.ndarray
    temp: np.ndarray
    humidity: np.ndarray
    loads: np.ndarray               # (N, 12), APPLIANCES order
    household: str = "household"

    def __len__(self) -> int:
        return len(self.timestamps)

    def records(self) -> list[HourlyRecord]:
        return [
            HourlyRecord(
                self.timestamps[i].astype(datetime),
                float(self.total[i]), float(self.temp[i]), float(self.humidity[i]),
                tuple(float(v) for v in self.loads[i]),
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[HourlyRecord], household: str = "household") -> "MeterData":
        n = len(records)
        return cls(
            timestamps=np.array([np.datetime64(r.timestamp, "h") for r in records], dtype="datetime64[h]"),
            total=np.array([r.total_load for r in records], dtype=np.float64),
            temp=np.array([r.temperature for r in records], dtype=np.float64),
            humidity=np.array([r.humidity for r in records], dtype=np.float64),
            loads=np.array([r.appliance_loads for r in records], dtype=np.float64).reshape(n, len(APPLIANCES)),
            household=household,
        )


# -- synthetic generation -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticParams:
    start: str = "2018-01-01"
    mean_temp: float = 20.0
    seasonal_amp: float = 9.0
    diurnal_amp: float = 5.0
    cooling_setpoint: float = 24.0
    heating_setpoint: float = 15.0
    away_start_prob: float = 0.04
    ev_prob: float = 0.75


def _ar1(gen: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    eps = gen.normal(0.0, sigma, n)
    out = np.empty(n)
    out[0] = eps[0] / np.sqrt(1 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _weather(gen, n_hours: int, doy: np.ndarray, hour: np.ndarray, p: SyntheticParams):
    seasonal = p.mean_temp + p.seasonal_amp * np.sin(2 * np.pi * (doy - 110) / 365.25)
    diurnal = p.diurnal_amp * np.sin(2 * np.pi * (hour - 9) / 24)
    # slow fronts on top of hourly jitter
    fronts = np.repeat(_ar1(gen, n_hours // 24 + 1, 0.7, 2.0), 24)[:n_hours]
    temp = seasonal + diurnal + fronts + _ar1(gen, n_hours, 0.8, 0.6)
    humidity = 65.0 - 1.8 * (temp - p.mean_temp) + _ar1(gen, n_hours, 0.9, 3.0)
    return temp, np.clip(humidity, 5.0, 100.0)


def _away_days(gen, days: int, prob: float) -> np.ndarray:
    away = np.zeros(days, dtype=bool)
    d = 0
    while d < days:
        if gen.random() < prob:
            length = int(gen.integers(2, 8))
            away[d:d + length] = True
            d += length
        else:
            d += 1
    return away


def _household(gen, regional_temp, regional_hum, ts, p: SyntheticParams, name: str) -> MeterData:
    n = len(ts)
    days = n // 24
    hour = (ts.astype("datetime64[h]").astype(np.int64) % 24).astype(int)
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]")).astype(int) + 1
    weekday = (ts.astype("datetime64[D]").astype(np.int64) + 3) % 7  # Monday = 0
    weekend = weekday >= 5

    temp = regional_temp + _ar1(gen, n, 0.9, 0.15)
    humidity = np.clip(regional_hum + _ar1(gen, n, 0.9, 0.5), 5.0, 100.0)
    away = np.repeat(_away_days(gen, days, p.away_start_prob), 24)[:n]
    home = ~away

    # activity level by hour of day
    weekday_profile = np.array([.05, .05, .05, .05, .05, .1, .5, .9, .7, .25, .2, .2,
                                .3, .2, .2, .25, .4, .8, .95, .95, .9, .8, .6, .3])
    weekend_profile = np.array([.1, .05, .05, .05, .05, .05, .2, .5, .8, .8, .7, .7,
                                .8, .7, .6, .6, .7, .9, .95, .95, .9, .85, .7, .4])
    activity = np.where(weekend, weekend_profile[hour], weekday_profile[hour]) * home
    scale = gen.uniform(0.8, 1.25)
    cold = np.clip((p.heating_setpoint + 3 - temp) / 10.0, 0.0, 1.5)
    hot = np.clip((temp - p.cooling_setpoint) / 10.0, 0.0, 1.5)
    u = gen.random((n, 12))
    loads = np.zeros((n, len(APPLIANCES)))

    def col(name):
        return APPLIANCES.index(name)

    # space conditioning follows the lagged outdoor temperature
    lagged = np.convolve(np.concatenate([[temp[0]] * 2, temp]), np.ones(3) / 3, mode="valid")
    cool_sp = np.where(home, p.cooling_setpoint, p.cooling_setpoint + 4)
    cooling = np.maximum(0.0, lagged - cool_sp)
    loads[:, col("ac")] = np.minimum(4.5, 0.32 * scale * cooling * (0.7 + 0.3 * (activity > 0.3)))
    heat_sp = np.where(home, p.heating_setpoint, p.heating_setpoint - 5)
    heating = np.maximum(0.0, heat_sp - lagged)
    loads[:, col("furnace")] = np.minimum(3.0, 0.28 * scale * heating)

    # pool pump: timer from 9am, run length grows with the day's mean temperature
    day_mean = np.repeat(temp[: days * 24].reshape(days, 24).mean(axis=1), 24)
    run_hours = np.clip(np.round((day_mean - 17.0) * 0.7), 0, 10)
    pool_on = (hour >= 9) & (hour < 9 + run_hours)
    loads[:, col("poolpump")] = pool_on * 1.1 * gen.uniform(0.9, 1.1) * (0.95 + 0.1 * u[:, 0])

    # refrigerator: always cycling, duty rises with heat and door openings
    duty = np.clip(0.3 + 0.012 * (temp - 10) + 0.15 * activity + 0.05 * (u[:, 1] - 0.5), 0.2, 0.9)
    loads[:, col("refrigerator")] = 0.16 * duty

    # EV: evening charging blocks on non-away days
    car = np.zeros(n)
    if gen.random() < p.ev_prob:
        for d in range(days):
            if away[d * 24] or gen.random() > 0.4:
                continue
            start = d * 24 + int(gen.integers(18, 23))
            length = int(gen.integers(2, 5))
            car[start:min(n, start + length)] = 3.3 * gen.uniform(0.9, 1.05)
    loads[:, col("car")] = car * home

    def plug(prob, lo, hi, r):
        on = u[:, r] < np.clip(prob, 0, 1)
        return on * gen.uniform(lo, hi, n)

    meal = np.isin(hour, (7, 12, 18, 19)).astype(float)
    loads[:, col("bathroom")] = plug(0.22 * activity * (1 + 1.2 * cold), 0.3, 1.5, 2)
    loads[:, col("kitchen")] = plug(0.25 * activity * (1 + 1.5 * meal) * (1 + 0.6 * cold - 0.3 * hot), 0.2, 2.0, 3)
    humid = np.clip((humidity - 75.0) / 25.0, 0.0, 1.0)
    loads[:, col("livingroom")] = plug(0.55 * activity * (1 + 0.4 * humid + 0.3 * hot), 0.08, 0.4, 4)
    bed_hours = np.isin(hour, (6, 7, 21, 22, 23)).astype(float)
    loads[:, col("bedroom")] = plug(0.5 * bed_hours * home * (1 + 0.5 * cold), 0.05, 0.3, 5)
    loads[:, col("garage")] = plug(0.08 * activity * (1 + 0.8 * hot), 0.2, 1.0, 6)
    wfh = gen.uniform(0.1, 0.6)
    office_hours = ((hour >= 9) & (hour < 17) & ~weekend).astype(float)
    loads[:, col("office")] = plug(wfh * office_hours * home, 0.1, 0.3, 7)
    sunrise = 7.0 - 1.0 * np.sin(2 * np.pi * (doy - 80) / 365.25)
    sunset = 18.5 + 1.5 * np.sin(2 * np.pi * (doy - 80) / 365.25)
    dark = (hour < sunrise) | (hour >= sunset)
    loads[:, col("lights_plugs")] = plug(0.7 * activity * dark + 0.1 * activity, 0.1, 0.6, 8)

    residual = 0.02 + np.abs(gen.normal(0.0, 0.03, n))
    total = loads.sum(axis=1) + residual
    assert np.all(total >= loads.sum(axis=1) - 1e-9)
    return MeterData(ts, total, temp, humidity, loads, household=name)


def generate_synthetic(households: int, days: int, seed: int,
                       params: SyntheticParams | None = None) -> list[MeterData]:
    """Simulate ``households`` homes over ``days`` days of hourly readings.

    All homes share one regional weather trace (with small local noise);
    appliance behaviour is drawn per home from its own random stream.
    """
    if households < 1:
        raise ValueError(f"households must be >= 1, got {households}")
    if days < 2:
        raise ValueError(f"days must be >= 2, got {days}")
    p = params or SyntheticParams()
    n = days * 24
    ts = np.datetime64(p.start, "h") + np.arange(n) * HOUR
    hour = np.arange(n) % 24
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]")).astype(int) + 1
    temp, hum = _weather(rng.stream(seed, "weather"), n, doy, hour, p)
    return [
        _household(rng.stream(seed, f"household:{h}"), temp, hum, ts, p, f"household_{h:03d}")
        for h in range(households)
    ]


# -- CSV ------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(data: MeterData, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(len(data)):
            stamp = str(data.timestamps[i].astype("datetime64[h]")) + ":00:00"
            w.writerow([stamp, _fmt(data.total[i]), _fmt(data.temp[i]), _fmt(data.humidity[i]),
                        *(_fmt(v) for v in data.loads[i])])


@dataclass
class IngestResult:
    data: MeterData
    dropped: int = 0
    gaps: list[tuple[str, str]] = field(default_factory=list)


_MISSING = {"", "na", "nan", "null", "none"}


def ingest_csv(path: str | Path, schema_map: Mapping[str, str] | None = None) -> IngestResult:
    """Read one household's hourly CSV.

    ``schema_map`` maps canonical column names (``CSV_COLUMNS``) to the names
    used in the file. Rows with any missing value are dropped and counted;
    breaks in hourly continuity are reported as ``(before, after)`` pairs.
    """
    path = Path(path)
    names = {c: (schema_map or {}).get(c, c) for c in CSV_COLUMNS}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header") from None
        index = {name.strip(): i for i, name in enumerate(header)}
        for canon, actual in names.items():
            if actual not in index:
                raise SchemaError(f"{path}: missing column {actual!r}" +
                                  (f" (for {canon!r})" if actual != canon else ""))
        cols = [index[names[c]] for c in CSV_COLUMNS]
        rows: list[tuple[np.datetime64, list[float]]] = []
        dropped = 0
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            cells = [row[i].strip() if i < len(row) else "" for i in cols]
            if any(c.lower() in _MISSING for c in cells):
                dropped += 1
                continue
            try:
                stamp = np.datetime64(cells[0].replace(" ", "T").rstrip("Z"), "h")
            except ValueError:
                raise RowError(line_no, f"unparseable timestamp {cells[0]!r}") from None
            values = []
            for canon, cell in zip(CSV_COLUMNS[1:], cells[1:]):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise RowError(line_no, f"unparseable {canon} value {cell!r}") from None
            rows.append((stamp, values))
    if rows:
        ts = np.array([r[0] for r in rows], dtype="datetime64[h]")
        vals = np.array([r[1] for r in rows], dtype=np.float64)
    else:
        ts = np.array([], dtype="datetime64[h]")
        vals = np.zeros((0, len(CSV_COLUMNS) - 1))
    gaps = [
        (str(ts[i]), str(ts[i + 1]))
        for i in np.flatnonzero(np.diff(ts) != HOUR)
    ] if len(ts) > 1 else []
    data = MeterData(ts, vals[:, 0], vals[:, 1], vals[:, 2], vals[:, 3:], household=path.stem)
    return IngestResult(data, dropped, gaps)


# -- windows ----------------------------------------------------------------------

@dataclass
class WindowSet:
    """Raw (kW, degC, %) windows: ``inputs`` (N, T, 3), ``targets`` (N, T, 12)."""

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    household: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.inputs[idx], self.targets[idx], self.starts[idx], self.household[idx])


def make_windows(series: Sequence[MeterData], window_len: int = 24, stride: int | None = None) -> WindowSet:
    """Cut contiguous windows starting at midnight (then every ``stride`` hours).

    Windows never span a gap in the hourly index or cross households.
    """
    stride = stride or window_len
    xs, ys, starts, owners = [], [], [], []
    for h, data in enumerate(series):
        ts = data.timestamps.astype("datetime64[h]")
        if len(ts) < window_len:
            continue
        feats = np.stack([data.total, data.temp, data.humidity], axis=1)
        # run_start[i]: index where the contiguous run containing i begins
        breaks = np.concatenate([[True], np.diff(ts) != HOUR])
        run_start = np.maximum.accumulate(np.where(breaks, np.arange(len(ts)), 0))
        first = np.flatnonzero(ts.astype(np.int64) % 24 == 0)
        if len(first) == 0:
            continue
        i = int(first[0])
        while i + window_len <= len(ts):
            end = i + window_len - 1
            if run_start[end] <= i:
                xs.append(feats[i:i + window_len])
                ys.append(data.loads[i:i + window_len])
                starts.append(ts[i])
                owners.append(h)
                i += stride
            else:
                # jump to the next midnight at or after the break
                j = int(run_start[end])
                i = j + int((24 - ts[j].astype(np.int64) % 24) % 24)
    if not xs:
        return WindowSet(np.zeros((0, window_len, 3)), np.zeros((0, window_len, len(APPLIANCES))),
                         np.array([], dtype="datetime64[h]"), np.array([], dtype=int))
    return WindowSet(np.stack(xs), np.stack(ys), np.array(starts, dtype="datetime64[h]"),
                     np.array(owners, dtype=int))


@dataclass
class NormStats:
    """Per-feature min/max for inputs and appliance targets."""

    input_min: np.ndarray
    input_max: np.ndarray
    target_min: np.ndarray
    target_max: np.ndarray

    @staticmethod
    def _scale(lo, hi):
        span = hi - lo
        return np.where(span > 0, span, 1.0), span > 0

    def normalize_inputs(self, x):
        span, ok = self._scale(self.input_min, self.input_max)
        return np.where(ok, (x - self.input_min) / span, 0.0)

    def normalize_targets(self, y):
        span, ok = self._scale(self.target_min, self.target_max)
        return np.where(ok, (y - self.target_min) / span, 0.0)

    def denormalize_targets(self, y):
        span, ok = self._scale(self.target_min, self.target_max)
        return np.where(ok, y * span + self.target_min, self.target_min)

    def denormalize_inputs(self, x):
        span, ok = self._scale(self.input_min, self.input_max)
        return np.where(ok, x * span + self.input_min, self.input_min)

    def to_dict(self) -> dict:
        return {
            "inputs": dict(zip(INPUT_COLUMNS, zip(self.input_min.tolist(), self.input_max.tolist()))),
            "targets": dict(zip(APPLIANCES, zip(self.target_min.tolist(), self.target_max.tolist()))),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormStats":
        ins = np.array([d["inputs"][c] for c in INPUT_COLUMNS], dtype=np.float64)
        tgs = np.array([d["targets"][a] for a in APPLIANCES], dtype=np.float64)
        return cls(ins[:, 0], ins[:, 1], tgs[:, 0], tgs[:, 1])


def fit_norm_stats(windows: WindowSet) -> NormStats:
    if len(windows) == 0:
        raise ValueError("cannot fit normalization on zero windows")
    x = windows.inputs.reshape(-1, windows.inputs.shape[-1])
    y = windows.targets.reshape(-1, windows.targets.shape[-1])
    stats = NormStats(x.min(0), x.max(0), y.min(0), y.max(0))
    names = list(INPUT_COLUMNS[: x.shape[1]]) + list(APPLIANCES[: y.shape[1]])
    lo = np.concatenate([stats.input_min, stats.target_min])
    hi = np.concatenate([stats.input_max, stats.target_max])
    for name, a, b in zip(names, lo, hi):
        if a == b:
            log.warning("feature %s is constant (%r) in training data; normalizing to 0", name, a)
    return stats


@dataclass
class NormalizedWindows:
    x: np.ndarray   # (N, T, 3) in [0, 1] on training windows
    y: np.ndarray   # (N, T, 12)
    raw: WindowSet

    def __len__(self) -> int:
        return len(self.x)


def normalize_and_window(series: Sequence[MeterData] | MeterData, train_index=None,
                         window_len: int = 24, stride: int | None = None
                         ) -> tuple[NormalizedWindows, NormStats]:
    """Window the series and min-max normalize every window.

    Statistics come from the windows listed in ``train_index`` (all windows
    when omitted).
    """
    if isinstance(series, MeterData):
        series = [series]
    windows = make_windows(series, window_len, stride)
    if len(windows) == 0:
        raise ValueError(f"need at least {window_len} contiguous midnight-aligned hours")
    fit_on = windows if train_index is None else windows.subset(train_index)
    stats = fit_norm_stats(fit_on)
    return apply_norm(windows, stats), stats


def apply_norm(windows: WindowSet, stats: NormStats) -> NormalizedWindows:
    return NormalizedWindows(stats.normalize_inputs(windows.inputs),
                             stats.normalize_targets(windows.targets), windows)


# -- partitioning -------------------------------------------------------------------

@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "homogeneous"
    num_clients: int = 5
    client_fraction: float = 0.20
    train_fraction: float = 0.70
    off_threshold: float = OFF_THRESHOLD_KW
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"partition mode must be homogeneous or heterogeneous, got {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        for name in ("client_fraction", "train_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0 and not (name == "client_fraction" and v == 1.0 and self.num_clients == 1):
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.num_clients * self.client_fraction > 1 + 1e-9:
            raise ValueError(
                f"{self.num_clients} clients x {self.client_fraction} exceeds the dataset"
            )


@dataclass
class ClientShard:
    client_id: int          # 1-based
    train: np.ndarray       # window indices
    test: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.train, self.test])


def off_state_scores(windows: WindowSet, threshold: float = OFF_THRESHOLD_KW) -> np.ndarray:
    """Share of appliance-hours below ``threshold`` in each window."""
    return (windows.targets < threshold).mean(axis=(1, 2))


def partition(windows: WindowSet, spec: PartitionSpec) -> list[ClientShard]:
    n = len(windows)
    quota = int(np.floor(n * spec.client_fraction + 1e-9))
    if quota < 2:
        raise ValueError(
            f"{n} windows give each of {spec.num_clients} clients only {quota} windows; need >= 2"
        )
    gen = rng.stream(spec.seed, f"partition:{spec.mode}")
    order = gen.permutation(n)
    if spec.mode == "homogeneous":
        blocks = [order[c * quota:(c + 1) * quota] for c in range(spec.num_clients)]
    else:
        scores = off_state_scores(windows, spec.off_threshold)
        # random tie-breaking, then highest off-state share first
        ranked = order[np.argsort(-scores[order], kind="stable")]
        last = ranked[:quota]
        rest = np.setdiff1d(order, last, assume_unique=True)
        rest = gen.permutation(rest)
        blocks = [rest[c * quota:(c + 1) * quota] for c in range(spec.num_clients - 1)] + [last]
    n_train = int(round(quota * spec.train_fraction))
    n_train = min(max(n_train, 1), quota - 1)
    shards = []
    for c, block in enumerate(blocks, start=1):
        block = rng.stream(spec.seed, f"split:{c}").permutation(block)
        shards.append(ClientShard(c, np.sort(block[:n_train]), np.sort(block[n_train:])))
    return shards
