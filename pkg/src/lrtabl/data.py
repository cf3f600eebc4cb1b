"""FI-2010 style day matrices: loading, normalization, windowing and day splits.

A day file is a numeric matrix with one row per feature (or label) and one
column per order-book event. Which rows hold the 40 raw LOB features and which
hold the horizon labels is described by a :class:`Layout`.
"""

import re
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

WINDOW_LEN = 10
TRAIN_DAYS = tuple(range(1, 8))
TEST_DAYS = (8, 9, 10)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Layout:
    """Row layout of a day file (0-based rows, ``feature_row_range`` half-open)."""

    feature_row_range: tuple = (0, 40)
    label_rows: tuple = (144, 145, 146, 147, 148)
    horizon_index: int = 0  # label rows are horizons of 10, 20, 30, 50, 100 events

    def __post_init__(self):
        object.__setattr__(self, "feature_row_range", tuple(self.feature_row_range))
        object.__setattr__(self, "label_rows", tuple(self.label_rows))
        lo, hi = self.feature_row_range
        if not 0 <= lo < hi:
            raise DataError(f"bad feature_row_range {self.feature_row_range}")
        if not self.label_rows:
            raise DataError("layout needs at least one label row")
        if not 0 <= self.horizon_index < len(self.label_rows):
            raise DataError(f"horizon_index {self.horizon_index} outside {len(self.label_rows)} label rows")

    @property
    def min_rows(self):
        return max(self.feature_row_range[1], max(self.label_rows) + 1)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        unknown = set(raw) - {"feature_row_range", "label_rows", "horizon_index"}
        if unknown:
            raise DataError(f"unknown layout keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class RawDayMatrix:
    features: np.ndarray  # (n_features, n_events)
    labels: np.ndarray  # (n_label_rows, n_events), values in {1, 2, 3}
    day_index: int
    source: str = ""

    @property
    def n_events(self):
        return self.features.shape[1]


@dataclass
class Dataset:
    windows: np.ndarray  # (N, n_features, window_len)
    labels: np.ndarray  # (N,), 0=up 1=stationary 2=down
    split: str
    days: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.days is None:
            self.days = np.zeros(len(self.labels), dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=3).astype(np.int64)

    def subset(self, idx, split=None):
        return Dataset(self.windows[idx], self.labels[idx], split or self.split, self.days[idx])

    def tail_split(self, frac=0.1):
        """Hold out the chronologically last ``frac`` of samples for validation."""
        n = len(self)
        if n < 2:
            raise DataError("need at least two samples to carve out a validation tail")
        n_val = min(n - 1, max(1, int(round(n * frac))))
        cut = n - n_val
        return self.subset(slice(0, cut), "fit"), self.subset(slice(cut, n), "val")


def _parse_matrix(path):
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in re.split(r"[,\s]+", line) if tok])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: cannot parse number ({exc})") from None
            if len(rows[-1]) != len(rows[0]):
                raise DataError(f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise DataError(f"{path}: empty file")
    return np.array(rows, dtype=np.float64)


def load_day_files(paths, layout=Layout(), day_indices=None):
    """Parse day files; days are numbered 1.. in the given order unless ``day_indices`` is set."""
    paths = [Path(p) for p in paths]
    if day_indices is None:
        day_indices = range(1, len(paths) + 1)
    out = []
    for path, day in zip(paths, day_indices):
        if not path.exists():
            raise FileNotFoundError(path)
        m = _parse_matrix(path)
        if m.shape[0] < layout.min_rows:
            raise DataError(f"{path}: {m.shape[0]} rows, layout needs at least {layout.min_rows}")
        lo, hi = layout.feature_row_range
        labels = m[list(layout.label_rows)]
        bad = ~np.isin(labels, (1.0, 2.0, 3.0))
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(
                f"{path}: label row {layout.label_rows[r]} column {c} has value {labels[r, c]!r}, expected 1, 2 or 3"
            )
        out.append(RawDayMatrix(m[lo:hi].copy(), labels.astype(np.int64), int(day), str(path)))
    return out


def write_fixture(day, path):
    """Write a day back in the text layout ``features`` rows then ``labels`` rows."""
    with open(path, "w") as f:
        for row in day.features:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")
        for row in day.labels:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def list_day_files(directory):
    """Files in ``directory`` sorted by the last integer in their name, then by name."""
    def key(p):
        nums = re.findall(r"\d+", p.stem)
        return (int(nums[-1]) if nums else -1, p.name)

    files = [p for p in Path(directory).iterdir() if p.is_file() and p.suffix in (".txt", ".csv", ".dat")]
    return sorted(files, key=key)


@dataclass(frozen=True)
class ZScoreStats:
    mean: np.ndarray
    std: np.ndarray


def fit_zscore(matrices):
    """Per-feature mean/std over the columns of all ``matrices``."""
    cat = np.concatenate([np.asarray(m, dtype=np.float64) for m in matrices], axis=1)
    return ZScoreStats(cat.mean(axis=1), cat.std(axis=1))


def zscore(m, stats=None):
    """Standardize each feature row; constant features pass through unchanged."""
    m = np.asarray(m, dtype=np.float64)
    if stats is None:
        stats = fit_zscore([m])
    flat = stats.std <= 0
    if flat.any():
        warnings.warn(f"{int(flat.sum())} constant feature row(s) left unnormalized: {np.flatnonzero(flat).tolist()}")
    mean = np.where(flat, 0.0, stats.mean)
    std = np.where(flat, 1.0, stats.std)
    return (m - mean[:, None]) / std[:, None]


def make_windows(day, window_len=WINDOW_LEN, horizon_index=0):
    """Stride-1 windows of the last ``window_len`` events, labelled at the window's final event."""
    if not 0 <= horizon_index < day.labels.shape[0]:
        raise DataError(f"horizon index {horizon_index} out of range for {day.labels.shape[0]} label rows")
    n = day.n_events
    if n < window_len:
        raise DataError(f"day {day.day_index} has {n} events, fewer than window length {window_len}")
    view = np.lib.stride_tricks.sliding_window_view(day.features, window_len, axis=1)
    windows = np.ascontiguousarray(view.transpose(1, 0, 2))
    labels = day.labels[horizon_index, window_len - 1:] - 1
    return windows, labels.astype(np.int64)


def _windows_for(days, split, window_len, horizon_index, dtype):
    ws, ls, ds = [], [], []
    for day in days:
        w, lab = make_windows(day, window_len, horizon_index)
        ws.append(w.astype(dtype))
        ls.append(lab)
        ds.append(np.full(len(lab), day.day_index, dtype=np.int64))
    if not ws:
        return Dataset(np.zeros((0, 0, window_len), dtype=dtype), np.zeros(0, dtype=np.int64), split)
    return Dataset(np.concatenate(ws), np.concatenate(ls), split, np.concatenate(ds))


def split_by_day(all_days, window_len=WINDOW_LEN, horizon_index=0, train_days=TRAIN_DAYS,
                 test_days=TEST_DAYS, dtype=np.float32):
    """Window each day separately and partition samples into train/test by day index."""
    present = {d.day_index for d in all_days}
    missing = sorted((set(train_days) | set(test_days)) - present)
    if missing:
        raise DataError(f"missing day indices: {missing}")
    train = _windows_for([d for d in all_days if d.day_index in train_days], "train", window_len, horizon_index, dtype)
    test = _windows_for([d for d in all_days if d.day_index in test_days], "test", window_len, horizon_index, dtype)
    return train, test


def build_datasets(all_days, horizon_index=0, normalize=False, window_len=WINDOW_LEN,
                   train_days=TRAIN_DAYS, test_days=TEST_DAYS, dtype=np.float32):
    """Optionally z-score with train-day statistics, then window and split.

    Returns ``(train, test, stats)``; ``stats`` is None when not normalizing.
    """
    stats = None
    if normalize:
        stats = fit_zscore([d.features for d in all_days if d.day_index in train_days])
        all_days = [RawDayMatrix(zscore(d.features, stats), d.labels, d.day_index, d.source) for d in all_days]
    train, test = split_by_day(all_days, window_len, horizon_index, train_days, test_days, dtype)
    return train, test, stats


def synthetic_lob(n_days, events_per_day, class_signal_strength, seed, n_features=40,
                  persistence=0.8, n_label_rows=5):
    """Random-walk LOB-like days whose features shift with the current label.

    Labels follow a sticky Markov chain with uniform stationary distribution.
    Each class has a fixed random mean pattern across features; at every event
    the pattern of the current label, scaled by ``class_signal_strength``
    (in units of the unit-variance observation noise), is added to the series.
    All label rows carry the same sequence.
    """
    rng = np.random.default_rng(seed)
    patterns = rng.normal(size=(3, n_features))
    levels = rng.uniform(-5.0, 5.0, size=n_features)
    days = []
    for day in range(1, n_days + 1):
        lab = np.empty(events_per_day, dtype=np.int64)
        lab[0] = rng.integers(3)
        stay = rng.random(events_per_day) < persistence
        jump = rng.integers(1, 3, size=events_per_day)
        for t in range(1, events_per_day):
            lab[t] = lab[t - 1] if stay[t] else (lab[t - 1] + jump[t]) % 3
        walk = np.cumsum(rng.normal(scale=0.05, size=events_per_day))
        noise = rng.normal(size=(n_features, events_per_day))
        feats = levels[:, None] + walk[None, :] + noise + class_signal_strength * patterns[lab].T
        labels = np.tile(lab + 1, (n_label_rows, 1))
        days.append(RawDayMatrix(feats, labels, day, f"synthetic-day-{day}"))
    return days
