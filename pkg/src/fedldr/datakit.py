"""Traffic time-series ingestion, synthetic generation, windowing and partitioning.

CSV layout (UTF-8, comma separated, no quoting)::

    timestamp,node_0,node_1,...,node_{N-1}
    0,12.5,3.0e1,...

For F > 1 features per node the columns are ``node_{i}_f{j}``, ordered by node
then feature. The timestamp column is kept as opaque text.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input file."""


class ConfigurationError(ValueError):
    """Requested split/window/partition is infeasible for the data."""


@dataclass
class TimeSeriesDataset:
    readings: np.ndarray  # steps x N x F
    timestamps: list[str] = field(default_factory=list)
    interval: str = ""

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=np.float64)
        if self.readings.ndim != 3:
            raise DataError(f"readings must be steps x nodes x features, got {self.readings.shape}")
        if not np.all(np.isfinite(self.readings)):
            raise DataError("readings contain non-finite values")

    @property
    def steps(self) -> int:
        return self.readings.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.readings.shape[1]

    @property
    def num_features(self) -> int:
        return self.readings.shape[2]


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray  # N x (T*F), time-major per node
    target: np.ndarray  # N x (horizon*F)
    origin: int  # first history timestep, relative to the segment


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # per feature
    std: np.ndarray


@dataclass(frozen=True)
class ClientPartition:
    ranges: tuple[tuple[int, int], ...]

    @property
    def num_nodes(self) -> int:
        return self.ranges[-1][1] if self.ranges else 0

    def __len__(self) -> int:
        return len(self.ranges)

    def __iter__(self):
        return iter(self.ranges)


# ---------------------------------------------------------------- CSV I/O

_NODE_COL = re.compile(r"^node_(\d+)(?:_f(\d+))?$")


def _parse_header(header: list[str]) -> tuple[int, int]:
    if not header or header[0].strip() != "timestamp":
        raise DataError("line 1: header must start with 'timestamp'")
    cols = header[1:]
    if not cols:
        raise DataError("line 1: header has no node columns")
    parsed = []
    for j, name in enumerate(cols, start=2):
        m = _NODE_COL.match(name.strip())
        if not m:
            raise DataError(f"line 1, column {j}: unrecognised column name {name!r}")
        parsed.append((int(m.group(1)), None if m.group(2) is None else int(m.group(2))))
    if all(f is None for _, f in parsed):
        expect = [(i, None) for i in range(len(parsed))]
        if parsed != expect:
            raise DataError("line 1: node columns must be node_0..node_{N-1} in order")
        return len(parsed), 1
    if any(f is None for _, f in parsed):
        raise DataError("line 1: mixes suffixed and unsuffixed node columns")
    n_feat = max(f for _, f in parsed) + 1
    n_nodes = len(parsed) // n_feat
    expect = [(i, f) for i in range(n_nodes) for f in range(n_feat)]
    if parsed != expect:
        raise DataError("line 1: suffixed columns must be node_{i}_f{j}, node-major, complete")
    return n_nodes, n_feat


def load_csv(path) -> TimeSeriesDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        n_nodes, n_feat = _parse_header(header)
        width = 1 + n_nodes * n_feat
        rows, stamps = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} cells, found {len(row)}")
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                bad = next(j for j, c in enumerate(row[1:], start=2) if not _is_number(c))
                raise DataError(
                    f"{path}: line {lineno}, column {bad}: non-numeric cell {row[bad - 1]!r}"
                ) from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            rows.append(vals)
            stamps.append(row[0])
    if not rows:
        raise DataError(f"{path}: no timesteps")
    readings = np.array(rows, dtype=np.float64).reshape(len(rows), n_nodes, n_feat)
    return TimeSeriesDataset(readings, stamps)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def save_csv(ds: TimeSeriesDataset, path) -> None:
    """Write ``ds`` in the load_csv layout; values use repr() so they round-trip exactly."""
    n, f = ds.num_nodes, ds.num_features
    if f == 1:
        cols = [f"node_{i}" for i in range(n)]
    else:
        cols = [f"node_{i}_f{j}" for i in range(n) for j in range(f)]
    stamps = ds.timestamps if len(ds.timestamps) == ds.steps else [str(t) for t in range(ds.steps)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["timestamp"] + cols) + "\n")
        for t in range(ds.steps):
            cells = [repr(float(v)) for v in ds.readings[t].ravel()]
            fh.write(",".join([stamps[t]] + cells) + "\n")


# ---------------------------------------------------------------- synthetic data


def ring_shortcut_graph(n: int, shortcuts: int, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic ring (each node linked to both neighbours) plus random shortcut edges."""
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i - 1) % n] = 1.0
        w[i, (i + 1) % n] = 1.0
    for _ in range(shortcuts):
        i, j = rng.choice(n, size=2, replace=False)
        w[i, j] = w[j, i] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def generate_synthetic(
    n: int,
    steps: int,
    seed: int,
    noise: float = 0.05,
    *,
    offset_scale: float = 2.0,
    level: float = 5.0,
    amplitude: float = 1.0,
    period: int = 24,
    shortcuts: int | None = None,
    phase_spread: float = 2 * math.pi,
    coupling: float = 0.6,
) -> tuple[TimeSeriesDataset, np.ndarray]:
    """Simulate ``x[t+1] = coupling * W x[t] + amplitude * sin(2 pi (t+1)/period + phase)
    + offset + noise`` on a hidden ring-with-shortcuts graph ``W``.

    Offsets are ``level + offset_scale * U(-1, 1)`` per node; phases are
    ``phase_spread * U(0, 1)`` per node. ``x[0]`` is the offset vector.
    Returns the dataset (steps x n x 1) and ``W``.
    """
    if n < 2 or steps < 1:
        raise ConfigurationError("generate_synthetic needs n >= 2 and steps >= 1")
    rng = np.random.default_rng(seed)
    if shortcuts is None:
        shortcuts = max(1, n // 4)
    w = ring_shortcut_graph(n, shortcuts, rng)
    offsets = level + offset_scale * rng.uniform(-1.0, 1.0, size=n)
    phases = phase_spread * rng.uniform(0.0, 1.0, size=n)
    eps = rng.standard_normal((steps, n))
    x = np.empty((steps, n))
    x[0] = offsets
    for t in range(steps - 1):
        season = amplitude * np.sin(2 * math.pi * (t + 1) / period + phases)
        x[t + 1] = coupling * (w @ x[t]) + season + offsets + noise * eps[t + 1]
    return TimeSeriesDataset(x[:, :, None], [str(t) for t in range(steps)], "1 step"), w


# ---------------------------------------------------------------- splitting and windows


def split_lengths(steps: int, fractions=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must be three values summing to 1, got {fractions}")
    n_train = int(math.floor(fractions[0] * steps + 1e-9))
    n_val = int(math.floor(fractions[1] * steps + 1e-9))
    return n_train, n_val, steps - n_train - n_val


def split_temporal(
    ds: TimeSeriesDataset, history: int, horizon: int, fractions=(0.70, 0.15, 0.15)
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contiguous train/val/test segments (steps x N x F); the remainder goes to test."""
    lengths = split_lengths(ds.steps, fractions)
    need = history + horizon
    for name, length in zip(("train", "validation", "test"), lengths):
        if length < need:
            raise ConfigurationError(
                f"{name} segment has {length} steps, fewer than history+horizon = {need}"
            )
    a, b = lengths[0], lengths[0] + lengths[1]
    r = ds.readings
    return r[:a].copy(), r[a:b].copy(), r[b:].copy()


def window_count(length: int, history: int, horizon: int) -> int:
    return max(0, length - (history + horizon) + 1)


def make_windows(segment: np.ndarray, history: int, horizon: int) -> list[WindowSample]:
    segment = np.asarray(segment, dtype=np.float64)
    count = window_count(segment.shape[0], history, horizon)
    if count == 0:
        raise ConfigurationError(
            f"segment of {segment.shape[0]} steps is shorter than history+horizon = {history + horizon}"
        )
    n = segment.shape[1]
    out = []
    for s in range(count):
        x = segment[s:s + history].transpose(1, 0, 2).reshape(n, -1)
        y = segment[s + history:s + history + horizon].transpose(1, 0, 2).reshape(n, -1)
        out.append(WindowSample(x, y, s))
    return out


def stack_windows(samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays: inputs B×N×(T*F), targets B×N×(horizon*F)."""
    return np.stack([s.input for s in samples]), np.stack([s.target for s in samples])


# ---------------------------------------------------------------- normalization


def fit_norm(train: np.ndarray) -> NormStats:
    """Per-feature z-score statistics over all steps and nodes of the training segment."""
    train = np.asarray(train, dtype=np.float64)
    mu = train.mean(axis=(0, 1))
    with np.errstate(over="ignore", invalid="ignore"):
        sd = train.std(axis=(0, 1))
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sd))):
        raise DataError("training segment statistics overflow; rescale the readings")
    if np.any(sd <= 0):
        bad = [int(i) for i in np.flatnonzero(sd <= 0)]
        raise ConfigurationError(f"feature(s) {bad} are constant on the training segment")
    return NormStats(mu, sd)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Z-score along the trailing feature axis."""
    return (np.asarray(values, dtype=np.float64) - stats.mean) / stats.std


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


def denormalize_flat(values: np.ndarray, stats: NormStats) -> np.ndarray:
    """Inverse z-score for window matrices whose last axis is time-major (steps*F)."""
    v = np.asarray(values, dtype=np.float64)
    f = stats.mean.shape[0]
    shaped = v.reshape(v.shape[:-1] + (v.shape[-1] // f, f))
    return denormalize(shaped, stats).reshape(v.shape)


# ---------------------------------------------------------------- partitioning


def partition_nodes(n: int, k: int) -> ClientPartition:
    """K contiguous ranges; the first N mod K clients get one extra node."""
    if k < 1 or k > n:
        raise ConfigurationError(f"cannot split {n} nodes among {k} clients (need 1 <= K <= N)")
    base, extra = divmod(n, k)
    ranges, lo = [], 0
    for i in range(k):
        hi = lo + base + (1 if i < extra else 0)
        ranges.append((lo, hi))
        lo = hi
    return ClientPartition(tuple(ranges))


def check_partition(partition: ClientPartition, n: int) -> None:
    """Raise if the ranges leave a gap, overlap, or miss part of [0, n)."""
    pos = 0
    for lo, hi in sorted(partition.ranges):
        if hi <= lo:
            raise ConfigurationError(f"empty node range [{lo}, {hi})")
        if lo > pos:
            raise ConfigurationError(f"nodes [{pos}, {lo}) are not assigned to any client")
        if lo < pos:
            raise ConfigurationError(f"node range [{lo}, {hi}) overlaps a previous range")
        pos = hi
    if pos != n:
        raise ConfigurationError(f"nodes [{pos}, {n}) are not assigned to any client")
