"""LOCF alignment of raw telemetry onto the downlink slot timeline, and filtering."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import channelsim as cs
from . import timing

DEFAULT_MAX_GAP = 16

SLOT_COLUMNS = (
    "dl_slot_index", "tick", "num_rb", "mcs", "crc_pass",
    "ss_rsrp", "ss_sinr", "csi_rsrp", "csi_sinr", "dl_cqi",
)
# pci is kept next to the record columns so filtering can be replayed from disk
TABLE_CSV_COLUMNS = SLOT_COLUMNS + ("pci",)
_INT_COLUMNS = {"dl_slot_index", "tick", "num_rb", "mcs", "crc_pass", "dl_cqi", "pci"}


class EmptyInputError(ValueError):
    """Nothing to align: empty log, or a required metric is never reported."""


@dataclass(frozen=True)
class SlotRecord:
    dl_slot_index: int
    tick: int
    num_rb: int
    mcs: int
    crc_pass: bool
    ss_rsrp: float
    ss_sinr: float
    csi_rsrp: float
    csi_sinr: float
    dl_cqi: int


@dataclass
class SlotTable:
    """Column-oriented per-downlink-slot table.

    Row ``i`` has ``dl_slot_index == i``. Gaps left by filtering (or missing
    PDSCH records) are recovered from the ticks; see ``gap_before``.
    """

    tick: np.ndarray
    num_rb: np.ndarray
    mcs: np.ndarray
    crc_pass: np.ndarray
    ss_rsrp: np.ndarray
    ss_sinr: np.ndarray
    csi_rsrp: np.ndarray
    csi_sinr: np.ndarray
    dl_cqi: np.ndarray
    pci: np.ndarray
    max_gap: int = DEFAULT_MAX_GAP
    tdd_period_slots: int = field(default=timing.TDD_PERIOD_SLOTS, init=False)
    dl_slots_per_period: int = field(default=timing.DL_SLOTS_PER_PERIOD, init=False)

    _ARRAYS = ("tick", "num_rb", "mcs", "crc_pass", "ss_rsrp", "ss_sinr",
               "csi_rsrp", "csi_sinr", "dl_cqi", "pci")

    def __len__(self):
        return len(self.tick)

    @property
    def dl_slot_index(self) -> np.ndarray:
        return np.arange(len(self), dtype=np.int64)

    @property
    def gap_before(self) -> np.ndarray:
        """Number of downlink slots missing immediately before each row."""
        ords = timing.dl_ordinal(self.tick)
        gap = np.zeros(len(self), dtype=np.int64)
        gap[1:] = np.diff(ords) - 1
        return gap

    def take(self, idx) -> "SlotTable":
        return replace(self, **{name: getattr(self, name)[idx] for name in self._ARRAYS})

    def __getitem__(self, sl: slice) -> "SlotTable":
        if not isinstance(sl, slice):
            raise TypeError("SlotTable supports slicing only; use row() for records")
        return self.take(sl)

    def row(self, i: int) -> SlotRecord:
        return SlotRecord(
            i, int(self.tick[i]), int(self.num_rb[i]), int(self.mcs[i]), bool(self.crc_pass[i]),
            float(self.ss_rsrp[i]), float(self.ss_sinr[i]), float(self.csi_rsrp[i]),
            float(self.csi_sinr[i]), int(self.dl_cqi[i]),
        )

    def rows(self):
        for i in range(len(self)):
            yield self.row(i)

    def equals(self, other: "SlotTable") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in self._ARRAYS)


def _locf_index(report_ticks, slot_ticks):
    """Index of the latest report at or before each slot tick (-1 if none)."""
    return np.searchsorted(report_ticks, slot_ticks, side="right") - 1


def align_locf(log: cs.RawTelemetryLog) -> SlotTable:
    """One row per downlink PDSCH slot with slow metrics carried forward.

    Slots preceding the first report of any metric are trimmed, and the
    result is cut to whole TDD periods.
    """
    if len(log) == 0:
        raise EmptyInputError("empty telemetry log")
    if np.any(np.diff(log.tick) < 0):
        raise ValueError("log timestamps must be non-decreasing")

    slot_tick, pd = log.select(cs.PDSCH)
    if len(slot_tick) == 0:
        raise EmptyInputError("log has no PDSCH records")
    if not np.all(timing.is_dl_tick(slot_tick)):
        bad = slot_tick[~timing.is_dl_tick(slot_tick)][0]
        raise ValueError(f"PDSCH record at uplink tick {bad}")

    carried = {}
    first_ok = np.ones(len(slot_tick), dtype=bool)
    for kind in (cs.RSRP, cs.SINR, cs.CSF, cs.PCI):
        rt, rf = log.select(kind)
        if len(rt) == 0:
            raise EmptyInputError(f"no {cs.RECORD_NAMES[kind]} reports in log")
        idx = _locf_index(rt, slot_tick)
        first_ok &= idx >= 0
        carried[kind] = rf[np.maximum(idx, 0)]

    # warm-up trim, then snap to whole periods
    period = timing.TDD_PERIOD_SLOTS
    if not first_ok.any():
        raise EmptyInputError("no slot is covered by every metric")
    t0 = slot_tick[np.argmax(first_ok)]
    start_tick = -(-t0 // period) * period
    last = slot_tick[-1]
    end_tick = last // period * period
    if last % period == timing.DL_POSITIONS[-1]:
        end_tick += period
    keep = (slot_tick >= start_tick) & (slot_tick < end_tick)
    if not keep.any():
        raise EmptyInputError("no complete TDD period after warm-up trim")

    rsrp, sinr, csf, pci = (carried[k][keep] for k in (cs.RSRP, cs.SINR, cs.CSF, cs.PCI))
    pd = pd[keep]
    return SlotTable(
        tick=slot_tick[keep].copy(),
        num_rb=pd[:, 1].astype(np.int64),
        mcs=pd[:, 0].astype(np.int64),
        crc_pass=pd[:, 2].astype(bool),
        ss_rsrp=rsrp[:, 0].copy(),
        ss_sinr=sinr[:, 0].copy(),
        csi_rsrp=rsrp[:, 1].copy(),
        csi_sinr=sinr[:, 1].copy(),
        dl_cqi=csf[:, 0].astype(np.int64),
        pci=pci[:, 0].astype(np.int64),
    )


def filter_slots(table: SlotTable, allowed_pcis=None, max_gap: int = DEFAULT_MAX_GAP) -> SlotTable:
    """Drop retransmission slots (MCS 28-31) and slots under disallowed PCIs.

    ``allowed_pcis=None`` admits every cell. Survivors are re-indexed; the
    removed stretches stay visible through ``gap_before``.
    """
    keep = table.mcs < cs.N_MCS
    if allowed_pcis is not None:
        keep &= np.isin(table.pci, np.fromiter(allowed_pcis, dtype=np.int64))
    out = table.take(keep)
    out.max_gap = max_gap
    return out


def span_ok(table: SlotTable, first: int, last: int) -> bool:
    """True if rows ``first..last`` have no internal gap wider than ``max_gap``."""
    if first < 0 or last >= len(table) or first > last:
        return False
    return bool(np.all(table.gap_before[first + 1:last + 1] <= table.max_gap))


def gap_violation_prefix(table: SlotTable) -> np.ndarray:
    """Cumulative count of over-wide gaps; rows a..b are clean iff c[b+1]-c[a+1]==0."""
    bad = (table.gap_before > table.max_gap).astype(np.int64)
    return np.concatenate([[0], np.cumsum(bad)])


def render_log(table: SlotTable) -> cs.RawTelemetryLog:
    """Re-emit a table as a log with every metric reported at every slot."""
    n = len(table)
    nan = np.full(n, np.nan)
    parts = [
        (cs.PCI, np.column_stack([table.pci, nan, nan])),
        (cs.RSRP, np.column_stack([table.ss_rsrp, table.csi_rsrp, nan])),
        (cs.SINR, np.column_stack([table.ss_sinr, table.csi_sinr, nan])),
        (cs.CSF, np.column_stack([table.dl_cqi, nan, nan])),
        (cs.PDSCH, np.column_stack([table.mcs, table.num_rb, table.crc_pass])),
    ]
    tick = np.concatenate([table.tick] * len(parts))
    kind = np.concatenate([np.full(n, k, dtype=np.int8) for k, _ in parts])
    flds = np.concatenate([f.astype(float) for _, f in parts])
    order = np.lexsort((kind, tick))
    return cs.RawTelemetryLog(tick[order], kind[order], flds[order])


def write_table_csv(table: SlotTable, path, comments=()) -> None:
    cols = [table.dl_slot_index.tolist()] + [getattr(table, c).tolist() for c in TABLE_CSV_COLUMNS[1:]]
    ints = [c in _INT_COLUMNS for c in TABLE_CSV_COLUMNS]
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# max_gap={table.max_gap}\n")
        fh.writelines(f"# {c}\n" for c in comments)
        fh.write(",".join(TABLE_CSV_COLUMNS) + "\n")
        buf = []
        for row in zip(*cols):
            buf.append(",".join(str(int(v)) if is_int else repr(float(v)) for v, is_int in zip(row, ints)) + "\n")
            if len(buf) >= 100_000:
                fh.writelines(buf)
                buf.clear()
        fh.writelines(buf)


def read_table_csv(path) -> SlotTable:
    with Path(path).open(newline="") as fh:
        max_gap = DEFAULT_MAX_GAP
        header = fh.readline()
        while header.startswith("#"):
            if header.startswith("# max_gap="):
                max_gap = int(header.split("=", 1)[1])
            header = fh.readline()
        names = header.strip().split(",")
        if tuple(names) != TABLE_CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected slot table header {names}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(TABLE_CSV_COLUMNS)))
    col = {name: data[:, i] for i, name in enumerate(TABLE_CSV_COLUMNS)}
    kwargs = {}
    for f in fields(SlotTable):
        if f.name in col:
            v = col[f.name]
            if f.name == "crc_pass":
                v = v.astype(bool)
            elif f.name in _INT_COLUMNS:
                v = v.astype(np.int64)
            kwargs[f.name] = v
    return SlotTable(max_gap=max_gap, **kwargs)
