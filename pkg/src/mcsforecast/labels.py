"""Conservative per-MCS success labels over the GOP horizon, and sample datasets.

Only the scheduled MCS is observed in each slot. A CRC pass at MCS ``m`` is
credited as a trial and a success to every ``k <= m``; a fail is charged as
a trial to ``m`` alone. Nothing is ever imputed from a failure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channelsim import N_MCS
from .features import N_FEATURES, WINDOW_SLOTS, GapViolationError, InsufficientHistoryError
from .ingest import SlotTable, gap_violation_prefix
from .timing import ms_to_dl_slots

OUTAGE = -1


class InsufficientFutureError(ValueError):
    pass


@dataclass(frozen=True)
class HorizonSpec:
    delay_dl_slots: int = ms_to_dl_slots(100)
    gop_dl_slots: int = ms_to_dl_slots(500)

    def __post_init__(self):
        if self.delay_dl_slots <= 0 or self.gop_dl_slots <= 0:
            raise ValueError("delay and GOP lengths must be positive")

    def horizon(self, anchor: int) -> tuple[int, int]:
        """First and last row of the label horizon for ``anchor`` (inclusive)."""
        first = anchor + self.delay_dl_slots + 1
        return first, first + self.gop_dl_slots - 1


@dataclass
class LabelVector:
    success: np.ndarray
    trials: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.trials > 0

    @property
    def prob(self) -> np.ndarray:
        """``S/T`` where trials exist, NaN elsewhere."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.valid, self.success / np.maximum(self.trials, 1), np.nan)


def accumulate_counts(mcs, crc_pass) -> tuple[np.ndarray, np.ndarray]:
    """Success and trial counts ``(S[28], T[28])`` over a run of slots."""
    mcs = np.asarray(mcs, dtype=np.int64)
    crc = np.asarray(crc_pass, dtype=bool)
    if mcs.size and (mcs.min() < 0 or mcs.max() >= N_MCS):
        raise ValueError("horizon slots must carry MCS in [0, 27]")
    passes = np.bincount(mcs[crc], minlength=N_MCS)
    fails = np.bincount(mcs[~crc], minlength=N_MCS)
    success = np.cumsum(passes[::-1])[::-1]
    return success, success + fails


def build_label(table: SlotTable, anchor: int, spec: HorizonSpec = HorizonSpec()) -> LabelVector:
    first, last = spec.horizon(anchor)
    if last >= len(table):
        raise InsufficientFutureError(f"anchor {anchor}: horizon ends at {last}, table has {len(table)} slots")
    c = gap_violation_prefix(table)
    if c[last + 1] - c[anchor + 1] != 0:
        raise GapViolationError(f"horizon of anchor {anchor} spans a gap wider than {table.max_gap}")
    s, t = accumulate_counts(table.mcs[first:last + 1], table.crc_pass[first:last + 1])
    return LabelVector(s, t)


def ground_truth_mcs(label: LabelVector, threshold: float = 0.9) -> int:
    """Highest valid MCS whose empirical success rate reaches ``threshold``."""
    return highest_at_least(label.prob, threshold)


def highest_at_least(prob, threshold: float) -> int:
    """Largest index with ``prob >= threshold`` (NaN never qualifies), else OUTAGE."""
    ok = np.flatnonzero(np.nan_to_num(np.asarray(prob, dtype=float), nan=-1.0) >= threshold)
    return int(ok[-1]) if ok.size else OUTAGE


def horizon_counts(table: SlotTable, anchors, spec: HorizonSpec = HorizonSpec(),
                   chunk_rows: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``accumulate_counts`` for many anchors; returns ``(S, T)`` of shape (n, 28).

    Works through windows of the trace so the per-MCS prefix sums stay small.
    Anchors must be sorted; horizon bounds are not checked here.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    n = len(anchors)
    S = np.zeros((n, N_MCS), dtype=np.int64)
    T = np.zeros((n, N_MCS), dtype=np.int64)
    if n == 0:
        return S, T
    if np.any(np.diff(anchors) < 0):
        raise ValueError("anchors must be sorted")
    lo_all = anchors + spec.delay_dl_slots + 1
    hi_all = lo_all + spec.gop_dl_slots
    mcs = table.mcs
    crc = table.crc_pass
    i = 0
    while i < n:
        base = lo_all[i]
        j = np.searchsorted(hi_all, base + max(chunk_rows, spec.gop_dl_slots), side="right")
        j = max(j, i + 1)
        top = hi_all[j - 1]
        m = mcs[base:top]
        ok = crc[base:top]
        onehot_pass = np.zeros((len(m) + 1, N_MCS), dtype=np.int32)
        onehot_fail = np.zeros((len(m) + 1, N_MCS), dtype=np.int32)
        rows = np.arange(1, len(m) + 1)
        onehot_pass[rows[ok], m[ok]] = 1
        onehot_fail[rows[~ok], m[~ok]] = 1
        np.cumsum(onehot_pass, axis=0, out=onehot_pass)
        np.cumsum(onehot_fail, axis=0, out=onehot_fail)
        lo = lo_all[i:j] - base
        hi = hi_all[i:j] - base
        passes = onehot_pass[hi] - onehot_pass[lo]
        fails = onehot_fail[hi] - onehot_fail[lo]
        s = np.cumsum(passes[:, ::-1], axis=1)[:, ::-1]
        S[i:j] = s
        T[i:j] = s + fails
        i = j
    return S, T


def valid_anchors(table: SlotTable, first_row: int, last_row: int, spec: HorizonSpec,
                  seq_len: int = WINDOW_SLOTS, stride: int = 1) -> np.ndarray:
    """Anchors whose window and horizon lie inside rows ``first_row..last_row`` with no wide gap."""
    lo = first_row + seq_len - 1
    hi = last_row - spec.delay_dl_slots - spec.gop_dl_slots
    if hi < lo:
        return np.zeros(0, dtype=np.int64)
    a = np.arange(lo, hi + 1, stride, dtype=np.int64)
    c = gap_violation_prefix(table)
    clean = c[a + spec.delay_dl_slots + spec.gop_dl_slots + 1] - c[a - seq_len + 2] == 0
    return a[clean]


@dataclass
class Sample:
    window: np.ndarray
    label: LabelVector
    anchor: int
    gt_mcs: int


def build_sample(table: SlotTable, features: np.ndarray, anchor: int, spec: HorizonSpec = HorizonSpec(),
                 threshold: float = 0.9, seq_len: int = WINDOW_SLOTS) -> Sample:
    if anchor < seq_len - 1:
        raise InsufficientHistoryError(f"anchor {anchor} lacks {seq_len} slots of history")
    label = build_label(table, anchor, spec)
    c = gap_violation_prefix(table)
    if c[anchor + 1] - c[anchor - seq_len + 2] != 0:
        raise GapViolationError(f"window ending at {anchor} spans a wide gap")
    return Sample(features[anchor - seq_len + 1:anchor + 1].copy(), label, anchor,
                  ground_truth_mcs(label, threshold))


# --- sample dataset file ----------------------------------------------------
#
# b"MCSDSET1\n", one JSON header line, then n fixed-size little-endian records:
#   anchor int64 | window float32[40][12] (unnormalized) | S uint16[28] | T uint16[28]

_MAGIC = b"MCSDSET1\n"


def record_dtype(seq_len: int = WINDOW_SLOTS, n_features: int = N_FEATURES) -> np.dtype:
    return np.dtype([
        ("anchor", "<i8"),
        ("window", "<f4", (seq_len, n_features)),
        ("S", "<u2", (N_MCS,)),
        ("T", "<u2", (N_MCS,)),
    ])


@dataclass
class SampleSet:
    anchor: np.ndarray
    window: np.ndarray
    S: np.ndarray
    T: np.ndarray
    meta: dict

    def __len__(self):
        return len(self.anchor)

    @property
    def valid(self) -> np.ndarray:
        return self.T > 0

    @property
    def prob(self) -> np.ndarray:
        return np.where(self.T > 0, self.S / np.maximum(self.T, 1), 0.0)


def make_sample_set(table: SlotTable, features: np.ndarray, anchors, spec: HorizonSpec,
                    seq_len: int = WINDOW_SLOTS, meta: dict | None = None) -> SampleSet:
    anchors = np.asarray(anchors, dtype=np.int64)
    S, T = horizon_counts(table, anchors, spec)
    if T.size and T.max() > np.iinfo(np.uint16).max:
        raise ValueError("GOP horizon too long for the uint16 count layout")
    offs = np.arange(-seq_len + 1, 1)
    win = features[anchors[:, None] + offs[None, :]].astype(np.float32) if len(anchors) else \
        np.zeros((0, seq_len, features.shape[1]), dtype=np.float32)
    return SampleSet(anchors, win, S.astype(np.uint16), T.astype(np.uint16), dict(meta or {}))


def concat_sample_sets(sets) -> SampleSet:
    sets = list(sets)
    meta = dict(sets[0].meta) if sets else {}
    return SampleSet(
        np.concatenate([s.anchor for s in sets]),
        np.concatenate([s.window for s in sets]),
        np.concatenate([s.S for s in sets]),
        np.concatenate([s.T for s in sets]),
        meta,
    )


def save_samples(ss: SampleSet, path) -> None:
    seq_len, n_feat = ss.window.shape[1:] if ss.window.ndim == 3 else (WINDOW_SLOTS, N_FEATURES)
    rec = np.zeros(len(ss), dtype=record_dtype(seq_len, n_feat))
    rec["anchor"] = ss.anchor
    rec["window"] = ss.window
    rec["S"] = ss.S
    rec["T"] = ss.T
    header = dict(ss.meta, n=len(ss), seq_len=int(seq_len), n_features=int(n_feat), n_mcs=N_MCS)
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(rec.tobytes())


def load_samples(path) -> SampleSet:
    with Path(path).open("rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a sample dataset file")
        header = json.loads(fh.readline())
        rec = np.frombuffer(fh.read(), dtype=record_dtype(header["seq_len"], header["n_features"]))
    if len(rec) != header["n"]:
        raise ValueError(f"{path}: truncated ({len(rec)} of {header['n']} records)")
    meta = {k: v for k, v in header.items() if k not in ("n", "seq_len", "n_features", "n_mcs")}
    return SampleSet(rec["anchor"].copy(), rec["window"].copy(), rec["S"].copy(), rec["T"].copy(), meta)
