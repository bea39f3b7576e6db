"""Sensor-series data plane: synthetic non-IID client generation, channel
z-normalization, sliding-window framing, stratified splits, and a generic
CSV ingester for 6-channel IMU exports.

The synthetic generator stands in for real multi-user recordings at desk
scale.  Statistical heterogeneity comes from per-client Dirichlet class
priors; system heterogeneity from a per-client device transform (channel
scale/offset plus an orthogonal mixing of each 3-axis sensor block).  Class
signatures (per-channel offset, amplitude, frequency) are shared across
clients so collaboration is actually useful.

Everything here is a pure function of (spec, seed).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WINDOW = 128
DEFAULT_STEP = 64  # 50% overlap
CSV_HEADER = ["timestamp", "ax", "ay", "az", "gx", "gy", "gz", "label"]


class CsvFormatError(ValueError):
    """Raised for malformed CSV exports; message cites the physical line."""


@dataclass(frozen=True)
class SensorSeries:
    """Multichannel sensor stream with per-sample labels."""

    data: np.ndarray  # [samples, channels]
    labels: np.ndarray  # [samples] int
    sample_rate: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data.ndim != 2:
            raise ValueError("series data must be [samples, channels]")
        if len(self.labels) != len(self.data):
            raise ValueError("labels must match the sample count")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class WindowSet:
    """Framed examples: windows [count, length, channels] plus one label per
    window (majority vote over its samples, ties to the lowest class)."""

    windows: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.windows.ndim != 3:
            raise ValueError("windows must be [count, length, channels]")
        if len(self.labels) != len(self.windows):
            raise ValueError("one label per window required")

    def __len__(self) -> int:
        return len(self.windows)


def concat_window_sets(sets) -> WindowSet:
    sets = [s for s in sets if len(s)]
    if not sets:
        raise ValueError("nothing to concatenate")
    return WindowSet(np.concatenate([s.windows for s in sets]),
                     np.concatenate([s.labels for s in sets]))


@dataclass(frozen=True)
class DeviceTransform:
    """Per-client channel distortion ranges (system heterogeneity)."""

    scale_range: tuple[float, float] = (0.8, 1.2)
    offset_range: tuple[float, float] = (-0.3, 0.3)
    rotation: bool = True


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the synthetic non-IID corpus.

    dirichlet_alpha drives statistical heterogeneity (small alpha: clients
    concentrate on few classes); device drives system heterogeneity.
    """

    clients: int
    classes: int
    dirichlet_alpha: float
    samples_per_client: tuple[int, int] = (3000, 6000)
    device: DeviceTransform = DeviceTransform()
    channels: int = 6
    sample_rate: float = 50.0
    segment_range: tuple[int, int] = (160, 320)
    noise: float = 0.3
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.clients < 1:
            raise ValueError("clients must be >= 1")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.samples_per_client[0] > self.samples_per_client[1]:
            raise ValueError("samples_per_client range is inverted")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


def z_normalize(series: SensorSeries) -> SensorSeries:
    """Channel-wise z-normalization with the population standard deviation.

    Constant channels are centered only and flagged in
    meta["constant_channels"].
    """
    mean = series.data.mean(axis=0)
    std = series.data.std(axis=0)
    constant = np.flatnonzero(std == 0)
    safe = np.where(std == 0, 1.0, std)
    data = (series.data - mean) / safe
    meta = dict(series.meta)
    meta["constant_channels"] = tuple(int(c) for c in constant)
    return SensorSeries(data, series.labels, series.sample_rate, meta)


def window(series: SensorSeries, length: int = DEFAULT_WINDOW,
           step: int = DEFAULT_STEP) -> WindowSet:
    """Frame the series at offsets 0, step, 2*step, ...; the trailing
    remainder is dropped.  Count = floor((N - length) / step) + 1."""
    n = len(series)
    if n < length:
        warnings.warn(f"series of {n} samples is shorter than one window ({length})")
        return WindowSet(np.zeros((0, length, series.data.shape[1]),
                                  dtype=series.data.dtype),
                         np.zeros(0, dtype=np.intp))
    count = (n - length) // step + 1
    offsets = np.arange(count) * step
    windows = np.stack([series.data[o:o + length] for o in offsets])
    labels = np.empty(count, dtype=np.intp)
    for i, o in enumerate(offsets):
        labels[i] = np.bincount(series.labels[o:o + length]).argmax()
    return WindowSet(windows, labels)


def stratified_split(ws: WindowSet, train_fraction: float = 0.8,
                     seed=0) -> tuple[WindowSet, WindowSet]:
    """Per-class split: round(n_c * fraction) windows to train, clamped so
    both sides keep at least one window when a class has >= 2.  Singleton
    classes go to train with a warning."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    for cls in np.unique(ws.labels):
        idx = np.flatnonzero(ws.labels == cls)
        if len(idx) == 1:
            warnings.warn(f"class {cls} has a single window; kept in train")
            train_idx.append(idx)
            continue
        perm = rng.permutation(idx)
        n_train = int(len(idx) * train_fraction + 0.5)
        n_train = min(max(n_train, 1), len(idx) - 1)
        train_idx.append(perm[:n_train])
        test_idx.append(perm[n_train:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.zeros(0, dtype=np.intp)
    return (WindowSet(ws.windows[train], ws.labels[train]),
            WindowSet(ws.windows[test], ws.labels[test]))


def _class_signatures(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shared per-(class, channel) signal parameters: offset, amplitude, Hz."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(101,)))
    offsets = rng.normal(0.0, 0.8, size=(spec.classes, spec.channels))
    amps = rng.uniform(0.4, 1.2, size=(spec.classes, spec.channels))
    freqs = rng.uniform(0.5, 10.0, size=(spec.classes, spec.channels))
    return offsets, amps, freqs


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def _client_series(spec: SyntheticSpec, client: int, offsets, amps, freqs,
                   priors: np.ndarray, rng: np.random.Generator) -> SensorSeries:
    lo, hi = spec.samples_per_client
    total = int(rng.integers(lo, hi + 1))
    data = np.empty((total, spec.channels))
    labels = np.empty(total, dtype=np.intp)
    segment_classes: list[int] = []
    pos = 0
    while pos < total:
        seg = int(rng.integers(spec.segment_range[0], spec.segment_range[1] + 1))
        seg = min(seg, total - pos)
        cls = int(rng.choice(spec.classes, p=priors))
        segment_classes.append(cls)
        t = (np.arange(pos, pos + seg) / spec.sample_rate)[:, None]
        phase = rng.uniform(0, 2 * np.pi, size=spec.channels)
        clean = offsets[cls] + amps[cls] * np.sin(2 * np.pi * freqs[cls] * t + phase)
        data[pos:pos + seg] = clean + rng.normal(0.0, spec.noise, size=(seg, spec.channels))
        labels[pos:pos + seg] = cls
        pos += seg

    # Device transform: orthogonal mixing per 3-axis block, then scale/offset.
    dev = spec.device
    if dev.rotation and spec.channels % 3 == 0:
        for block in range(spec.channels // 3):
            q = _orthogonal(rng, 3)
            sl = slice(3 * block, 3 * block + 3)
            data[:, sl] = data[:, sl] @ q.T
    scale = rng.uniform(*dev.scale_range, size=spec.channels)
    offset = rng.uniform(*dev.offset_range, size=spec.channels)
    data = data * scale + offset

    meta = {"client": client, "priors": priors.tolist(),
            "segment_classes": segment_classes}
    return SensorSeries(data, labels, spec.sample_rate, meta)


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[WindowSet, WindowSet]]:
    """Per-client (train, test) window sets through the standard pipeline
    generate -> normalize -> window -> split.

    Normalization statistics are computed per client over its own series;
    nothing crosses clients.
    """
    offsets, amps, freqs = _class_signatures(spec)
    out = []
    for k in range(spec.clients):
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(102, k)))
        priors = rng.dirichlet(np.full(spec.classes, spec.dirichlet_alpha))
        series = _client_series(spec, k, offsets, amps, freqs, priors, rng)
        ws = window(z_normalize(series))
        split_seed = np.random.SeedSequence(spec.seed, spawn_key=(103, k))
        out.append(stratified_split(ws, spec.train_fraction, split_seed))
    return out


@dataclass(frozen=True)
class CsvSchema:
    """Contract for ingested CSV exports.

    Header must read exactly: timestamp,ax,ay,az,gx,gy,gz,label.
    target_hz enables integer-factor decimation (e.g. 100 Hz -> 50 Hz).
    label_map translates string labels; None means integer labels.
    """

    sample_rate_hz: float
    target_hz: float | None = 50.0
    label_map: dict[str, int] | None = None


def ingest_csv(path, schema: CsvSchema) -> SensorSeries:
    """Parse a 6-channel IMU export into a SensorSeries.

    Malformed rows raise CsvFormatError citing the 1-based physical line;
    a non-integer downsampling factor is rejected.
    """
    rows: list[list[float]] = []
    labels: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError("line 1: empty file") from None
        if header != CSV_HEADER:
            raise CsvFormatError(
                f"line 1: header {header!r} != expected {CSV_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise CsvFormatError(
                    f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}"
                )
            try:
                values = [float(v) for v in row[1:7]]
            except ValueError as exc:
                raise CsvFormatError(f"line {lineno}: {exc}") from None
            raw_label = row[7]
            if schema.label_map is not None:
                if raw_label not in schema.label_map:
                    raise CsvFormatError(f"line {lineno}: unknown label {raw_label!r}")
                label = schema.label_map[raw_label]
            else:
                try:
                    label = int(raw_label)
                except ValueError:
                    raise CsvFormatError(
                        f"line {lineno}: label {raw_label!r} is not an integer"
                    ) from None
            rows.append(values)
            labels.append(label)

    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), 6)
    label_arr = np.asarray(labels, dtype=np.intp)
    rate = schema.sample_rate_hz
    if schema.target_hz is not None and rate != schema.target_hz:
        factor = rate / schema.target_hz
        if factor < 1 or abs(factor - round(factor)) > 1e-9:
            raise CsvFormatError(
                f"cannot downsample {rate} Hz to {schema.target_hz} Hz: "
                f"factor {factor} is not a positive integer"
            )
        step = int(round(factor))
        data, label_arr = data[::step], label_arr[::step]
        rate = schema.target_hz
    return SensorSeries(data, label_arr, rate, {"source": str(path)})
