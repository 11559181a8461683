"""Engineered features, z-score normalization and 40-slot window extraction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import SlotTable, gap_violation_prefix

FEATURE_NAMES = (
    "num_rb", "mcs", "crc_state", "ss_rsrp", "ss_sinr", "csi_rsrp", "csi_sinr", "dl_cqi",
    "consecutive_nacks", "time_since_last_nack", "mcs_trend", "cqi_trend",
)
N_FEATURES = len(FEATURE_NAMES)
MCS_COL = FEATURE_NAMES.index("mcs")
WINDOW_SLOTS = 40
TREND_WINDOW = 16
STD_FLOOR = 1e-6


class InsufficientHistoryError(ValueError):
    pass


class GapViolationError(ValueError):
    pass


def compute_counters(crc_pass) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot ``(consecutive_nacks, time_since_last_nack)``.

    Both counters start at 0 and are uncapped. Before the first NACK,
    time_since_last_nack counts slots since the start of the trace, so a
    leading ``[P, P]`` gives ``[1, 2]``.
    """
    crc = np.asarray(crc_pass, dtype=bool)
    n = len(crc)
    if n == 0:
        raise ValueError("empty slot sequence")
    idx = np.arange(n)
    fail = ~crc
    # position of the most recent fail / pass at or before each slot
    last_fail = np.maximum.accumulate(np.where(fail, idx, -1))
    last_pass = np.maximum.accumulate(np.where(crc, idx, -1))
    consecutive = np.where(fail, idx - last_pass, 0)
    since = np.where(last_fail >= 0, idx - last_fail, idx + 1)
    return consecutive.astype(np.int64), since.astype(np.int64)


def rolling_mean(x, window: int = TREND_WINDOW) -> np.ndarray:
    """Trailing mean over ``min(window, slots so far)`` samples."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(x, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    hi = np.arange(1, len(x) + 1)
    lo = np.maximum(hi - window, 0)
    return (c[hi] - c[lo]) / (hi - lo)


def compute_trends(table: SlotTable, window: int = TREND_WINDOW):
    return rolling_mean(table.mcs, window), rolling_mean(table.dl_cqi, window)


def feature_matrix(table: SlotTable) -> np.ndarray:
    """Unnormalized ``(n_slots, 12)`` feature matrix in ``FEATURE_NAMES`` order."""
    nacks, since = compute_counters(table.crc_pass)
    mcs_trend, cqi_trend = compute_trends(table)
    return np.column_stack([
        table.num_rb, table.mcs, table.crc_pass, table.ss_rsrp, table.ss_sinr,
        table.csi_rsrp, table.csi_sinr, table.dl_cqi,
        nacks, since, mcs_trend, cqi_trend,
    ]).astype(float)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    names: tuple = FEATURE_NAMES

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def save(self, path, comments=()) -> None:
        lines = [f"# {c}\n" for c in comments]
        lines += [f"{n} {m!r} {s!r}\n" for n, m, s in zip(self.names, self.mean.tolist(), self.std.tolist())]
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path) -> "Normalizer":
        names, mean, std = [], [], []
        for line in Path(path).read_text().splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            n, m, s = line.split()
            names.append(n)
            mean.append(float(m))
            std.append(float(s))
        return cls(np.array(mean), np.array(std), tuple(names))


def fit_normalizer(train_rows) -> Normalizer:
    """Z-score statistics of the training rows; std floored at ``STD_FLOOR``."""
    x = np.asarray(train_rows, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("fit_normalizer needs at least two feature rows")
    return Normalizer(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


@dataclass
class FeatureWindow:
    matrix: np.ndarray
    anchor_slot: int


def check_window(table: SlotTable, anchor: int, seq_len: int = WINDOW_SLOTS, prefix=None) -> None:
    if anchor < seq_len - 1:
        raise InsufficientHistoryError(f"anchor {anchor} has fewer than {seq_len} slots of history")
    if anchor >= len(table):
        raise IndexError(f"anchor {anchor} beyond table of {len(table)} slots")
    c = gap_violation_prefix(table) if prefix is None else prefix
    if c[anchor + 1] - c[anchor - seq_len + 2] != 0:
        raise GapViolationError(f"window ending at {anchor} spans a gap wider than {table.max_gap} slots")


def extract_window(table: SlotTable, features: np.ndarray, anchor: int, normalizer: Normalizer | None,
                   seq_len: int = WINDOW_SLOTS) -> FeatureWindow:
    """The ``seq_len`` rows ending at ``anchor``, normalized when a normalizer is given."""
    check_window(table, anchor, seq_len)
    raw = features[anchor - seq_len + 1:anchor + 1]
    return FeatureWindow(normalizer.apply(raw) if normalizer is not None else raw.copy(), anchor)
