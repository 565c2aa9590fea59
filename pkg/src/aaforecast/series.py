"""Series data model, CSV ingestion, normalization, windowing and synthetic scenarios."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np

N_CHANNELS = 6
CHANNELS = ("x", "e", "s", "t", "a", "r")


class SeriesError(ValueError):
    """Raised for malformed or inconsistent series data."""


@dataclass
class RawSeries:
    id: str
    timestamps: np.ndarray
    values: np.ndarray
    events: np.ndarray
    cycle: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.events = np.asarray(self.events, dtype=float)
        self.timestamps = np.asarray(self.timestamps)
        T = len(self.values)
        if len(self.events) != T or len(self.timestamps) != T:
            raise SeriesError(f"series {self.id!r}: values, events and timestamps differ in length")
        if self.cycle < 1:
            raise SeriesError(f"series {self.id!r}: cycle must be a positive integer")
        if np.any(self.events < 0):
            raise SeriesError(f"series {self.id!r}: negative event level")
        if not np.all(np.isfinite(self.values)):
            raise SeriesError(f"series {self.id!r}: non-finite value")
        _check_spacing(self.timestamps, self.id)

    def __len__(self):
        return len(self.values)

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(self.id, self.timestamps[start:stop], self.values[start:stop],
                         self.events[start:stop], self.cycle)


@dataclass
class FeatureWindow:
    """A window of ``tau`` feature rows (channels x, e, s, t, a, r) and the next-step label."""

    features: np.ndarray
    label: float
    origin: tuple
    critical: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise SeriesError("window features must be a tau x channels matrix")
        if self.critical is None:
            self.critical = critical_mask(self.features)

    @property
    def tau(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    series: list
    split: str = "train"

    def __post_init__(self):
        if self.split not in ("train", "test", "unseen"):
            raise SeriesError(f"unknown split tag {self.split!r}")
        ids = [s.id for s in self.series]
        if len(set(ids)) != len(ids):
            raise SeriesError("series ids must be unique within a dataset")

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def ids(self) -> list:
        return [s.id for s in self.series]

    def subset(self, ids, split=None) -> "Dataset":
        wanted = set(ids)
        return Dataset([s for s in self.series if s.id in wanted], split or self.split)


@dataclass
class Normalizer:
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise SeriesError("normalizer scale must be positive")

    @classmethod
    def fit(cls, values) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        loc = float(values.mean())
        scale = float(values.std())
        # constant segments keep unit scale
        if not scale > 1e-12 * max(1.0, abs(loc)):
            scale = 1.0
        return cls(loc, scale)

    def normalize(self, values):
        return (np.asarray(values, dtype=float) - self.loc) / self.scale

    def denormalize(self, values):
        return np.asarray(values, dtype=float) * self.scale + self.loc


def critical_mask(features: np.ndarray) -> np.ndarray:
    """Rows where the event channel is nonzero or the anomaly channel differs from 1."""
    features = np.asarray(features)
    crit = features[:, 1] != 0
    if features.shape[1] >= 5:
        crit = crit | (features[:, 4] != 1)
    return crit


def _parse_time(token: str):
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(token.replace("Z", "+00:00"))
    except ValueError as exc:
        raise SeriesError(f"unparseable timestamp {token!r}") from exc


def _check_spacing(timestamps: np.ndarray, sid) -> None:
    if len(timestamps) < 2:
        return
    diffs = np.diff(timestamps)
    if np.issubdtype(timestamps.dtype, np.datetime64):
        diffs = diffs.astype("timedelta64[ns]").astype(np.int64)
    elif timestamps.dtype == object:
        diffs = np.array([d.total_seconds() if hasattr(d, "total_seconds") else d for d in diffs], dtype=float)
    if np.any(diffs <= 0):
        raise SeriesError(f"series {sid!r}: timestamps not strictly increasing")
    if np.any(diffs != diffs[0]):
        raise SeriesError(f"series {sid!r}: non-uniform spacing")


@dataclass
class CsvSchema:
    series_id: str = "series_id"
    timestamp: str = "timestamp"
    value: str = "value"
    event_level: str = "event_level"
    cycle: int = 12


def load_csv(path, schema: CsvSchema | None = None) -> Dataset:
    """Read a long-format CSV into one ``RawSeries`` per series id.

    Rows are sorted by timestamp within each series. A missing event column
    defaults every event level to 0.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.series_id, schema.timestamp, schema.value):
            if col not in header:
                raise SeriesError(f"missing column {col!r} in {path}")
        has_events = schema.event_level in header
        rows: dict = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row[schema.series_id]
            try:
                value = float(row[schema.value])
                event = float(row[schema.event_level]) if has_events and row[schema.event_level] != "" else 0.0
            except (TypeError, ValueError) as exc:
                raise SeriesError(f"{path}:{lineno}: unparseable number") from exc
            rows.setdefault(sid, []).append((_parse_time(row[schema.timestamp]), value, event))

    series = []
    for sid, items in rows.items():
        try:
            items.sort(key=lambda r: r[0])
        except TypeError as exc:
            raise SeriesError(f"series {sid!r}: mixed timestamp types") from exc
        stamps = [r[0] for r in items]
        if len(set(stamps)) != len(stamps):
            raise SeriesError(f"series {sid!r}: duplicate timestamp")
        if isinstance(stamps[0], datetime):
            ts = np.array(stamps, dtype=object)
        else:
            ts = np.array(stamps, dtype=np.int64)
        series.append(RawSeries(sid, ts, [r[1] for r in items], [r[2] for r in items], schema.cycle))
    return Dataset(series, "train")


def write_csv(path, dataset: Dataset) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["series_id", "timestamp", "value", "event_level"])
        for s in dataset:
            for ts, v, e in zip(s.timestamps, s.values, s.events):
                stamp = ts.isoformat() if isinstance(ts, datetime) else int(ts)
                w.writerow([s.id, stamp, repr(float(v)), repr(float(e))])


def train_length(T: int) -> int:
    return int(math.floor(0.8 * T))


def split_80_20(d: Dataset) -> tuple:
    """Chronological 80/20 split of every series: the older 80% trains, the rest tests."""
    train, test = [], []
    for s in d:
        T = len(s)
        if T < 5:
            raise SeriesError(f"series {s.id!r} too short to split (T={T})")
        n = train_length(T)
        train.append(s.slice(0, n))
        test.append(s.slice(n, T))
    return Dataset(train, "train"), Dataset(test, "test")


def make_windows(features: np.ndarray, tau: int, *, series_id="", critical=None, labels=None,
                 start: int = 0) -> list:
    """Stride-1 windows over a (T, channels) feature matrix.

    The window ending at index ``t`` covers rows ``t-tau+1 .. t`` and is labelled
    with the first channel at ``t+1`` (or ``labels[t+1]`` when given).
    """
    features = np.asarray(features, dtype=float)
    T = features.shape[0]
    if tau < 1:
        raise SeriesError("tau must be a positive integer")
    if tau >= T:
        raise SeriesError(f"tau={tau} needs at least {tau + 1} points, series has {T}")
    crit = critical_mask(features) if critical is None else np.asarray(critical, dtype=bool)
    target = features[:, 0] if labels is None else np.asarray(labels, dtype=float)
    out = []
    for t in range(max(tau - 1, start), T - 1):
        out.append(FeatureWindow(features[t - tau + 1:t + 1], float(target[t + 1]),
                                 (series_id, t), crit[t - tau + 1:t + 1]))
    return out


# --------------------------------------------------------------------------
# synthetic scenarios


@dataclass
class ScenarioConfig:
    """Recipe for a synthetic series.

    ``anomalies`` and ``events`` are lists of ``(index, magnitude)`` and
    ``(index, level)`` pairs. ``patterns`` adds per-series repeating random
    sequences as ``(period, amplitude)`` pairs. ``event_response`` scales the
    series at and after each event start by ``1 + gain * level * k`` for each
    ``k`` in the profile.
    """

    T: int = 120
    cycle: int = 12
    level: float = 10.0
    slope: float = 0.0
    amp: list = field(default_factory=lambda: [0.2])
    noise: float = 0.0
    anomalies: list = field(default_factory=list)
    events: list = field(default_factory=list)
    patterns: list = field(default_factory=list)
    event_response: list = field(default_factory=list)
    event_gain: float = 0.0
    series_id: str = "synth"

    KEYS = ("T", "cycle", "level", "slope", "amp", "noise", "anomalies", "events",
            "patterns", "event_response", "event_gain", "series_id")

    @classmethod
    def from_mapping(cls, kv: dict) -> "ScenarioConfig":
        cfg = cls()
        for key, raw in kv.items():
            if key not in cls.KEYS:
                continue
            if key in ("T", "cycle"):
                setattr(cfg, key, int(raw))
            elif key in ("level", "slope", "noise", "event_gain"):
                setattr(cfg, key, float(raw))
            elif key in ("amp", "event_response"):
                setattr(cfg, key, [float(v) for v in str(raw).replace(";", ",").split(",") if v.strip()])
            elif key in ("anomalies", "events", "patterns"):
                setattr(cfg, key, _parse_pairs(raw, int_first=True))
            else:
                setattr(cfg, key, str(raw))
        return cfg


def _parse_pairs(raw, int_first=True) -> list:
    pairs = []
    for chunk in str(raw).replace(";", ",").split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        a, _, b = chunk.partition(":")
        if not b:
            raise SeriesError(f"expected index:value pair, got {chunk!r}")
        pairs.append((int(a) if int_first else float(a), float(b)))
    return pairs


def synth_generate(cfg: ScenarioConfig, seed: int) -> RawSeries:
    """Generate ``trend * seasonal * noise`` and apply the configured injections.

    Noise is multiplicative and bounded: each step is scaled by ``1 + noise * u``
    with ``u ~ Uniform(-1, 1)``.
    """
    rng = np.random.default_rng(seed)
    T, cycle = cfg.T, cfg.cycle
    if T < 2 or cycle < 1:
        raise SeriesError("scenario needs T >= 2 and a positive cycle")
    idx = np.arange(T, dtype=float)
    trend = cfg.level + cfg.slope * idx
    seasonal = np.ones(T)
    for k, a in enumerate(cfg.amp, start=1):
        seasonal += a * np.sin(2.0 * np.pi * k * idx / cycle)
    base = trend * seasonal
    if np.any(base <= 0):
        raise SeriesError("scenario produces non-positive base values (trend * seasonal)")
    if not 0 <= cfg.noise < 1:
        raise SeriesError("noise scale must lie in [0, 1)")

    x = base.copy()
    for period, amplitude in cfg.patterns:
        motif = rng.uniform(-1.0, 1.0, size=int(period))
        x *= 1.0 + amplitude * motif[np.arange(T) % int(period)]
    noise = rng.uniform(-1.0, 1.0, size=T)
    if cfg.noise > 0:
        x *= 1.0 + cfg.noise * noise

    events = np.zeros(T)
    for i, lvl in cfg.events:
        if not 0 <= i < T:
            raise SeriesError(f"event index {i} out of range [0, {T})")
        if lvl < 0:
            raise SeriesError("event level must be non-negative")
        events[i] = lvl
    if cfg.event_response and cfg.event_gain:
        starts = [i for i in range(T) if events[i] > 0 and (i == 0 or events[i - 1] == 0)]
        for i in starts:
            for k, w in enumerate(cfg.event_response):
                if i + k < T:
                    x[i + k] *= 1.0 + cfg.event_gain * events[i] * w
        if np.any(x <= 0):
            raise SeriesError("event response drives the series non-positive")

    for i, magnitude in cfg.anomalies:
        if not 0 <= i < T:
            raise SeriesError(f"anomaly index {i} out of range [0, {T})")
        if magnitude <= 0:
            raise SeriesError("anomaly magnitude must be positive")
        x[i] *= magnitude

    return RawSeries(cfg.series_id, np.arange(T, dtype=np.int64), x, events, cycle)
