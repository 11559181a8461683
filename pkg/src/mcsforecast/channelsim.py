"""Synthetic slot-level 5G downlink telemetry.

Stands in for modem diagnostic logs: a shadowed, fast-fading SINR process
with abrupt mobility drops drives a CQI-fed scheduler with outer-loop link
adaptation (OLLA), and per-slot CRC outcomes are drawn from a logistic BLER
curve. Slow metrics (SINR, RSRP) are reported at their own periods.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from . import timing

N_MCS = 28

# 3GPP TS 38.214 Table 5.1.3.1-2 (256QAM), spectral efficiency in bit/s/Hz
MCS_TABLE2_SE = np.array([
    0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.6953, 1.9141,
    2.1602, 2.4063, 2.5703, 2.7305, 3.0293, 3.3223, 3.6094, 3.9023,
    4.2129, 4.5234, 4.8164, 5.1152, 5.3320, 5.5547, 5.8906, 6.2266,
    6.5703, 6.9141, 7.1602, 7.4063,
])

# BLER curve: thresh(m) = OFFSET + PER_SE * SE(m) is the 50% point
BLER_SINR_OFFSET_DB = -4.0
BLER_SINR_PER_SE_DB = 3.6
BLER_SLOPE_PER_DB = 1.5

MCS_THRESH_DB = BLER_SINR_OFFSET_DB + BLER_SINR_PER_SE_DB * MCS_TABLE2_SE

# CQI quantizer: cqi c is reported for SINR in [CQI_BASE + c*STEP, CQI_BASE + (c+1)*STEP)
CQI_BASE_DB = -3.0
CQI_STEP_DB = 1.9

# record kinds, in their within-tick emission order
PCI, RSRP, SINR, CSF, PDSCH = range(5)
RECORD_NAMES = ("PCI", "RSRP", "SINR", "CSF", "PDSCH")
_KIND_BY_NAME = {name: k for k, name in enumerate(RECORD_NAMES)}
RECORD_FIELDS = {
    PCI: ("pci",),
    RSRP: ("ss_rsrp_dbm", "csi_rsrp_dbm"),
    SINR: ("ss_sinr_db", "csi_sinr_db"),
    CSF: ("dl_cqi",),
    PDSCH: ("mcs", "num_rb", "crc_pass"),
}
_INT_KINDS = (PCI, CSF, PDSCH)

CSV_HEADER = ("tick", "record_type", "field1", "field2", "field3")

RSRP_MIN_DBM = -140.0
RSRP_MAX_DBM = -44.0


@dataclass
class ChannelSimConfig:
    duration_s: float = 600.0
    seed: int = 0
    sinr_mean_db: float = 14.0
    sinr_shadow_std_db: float = 4.0
    shadow_corr_s: float = 3.0
    fast_fading_std_db: float = 2.0
    coherence_ms: float = 30.0
    mobility_events_per_min: float = 3.0
    drop_depth_db: tuple[float, float] = (5.0, 14.0)
    drop_hold_s: float = 1.0
    drop_recovery_s: float = 0.5
    olla_target_bler: float = 0.10
    olla_down_step_db: float = 0.5
    cqi_feedback_delay_ms: float = 4.0
    report_period_cqi_ms: float = 0.5
    report_period_sinr_ms: float = 20.0
    report_period_rsrp_ms: float = 160.0
    rsrp_mean_dbm: float = -95.0
    max_rb: int = 273
    pci: int = 441

    def __post_init__(self):
        self.drop_depth_db = tuple(self.drop_depth_db)
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if not 0.0 < self.olla_target_bler < 1.0:
            raise ValueError("olla_target_bler must lie in (0, 1)")
        for name in ("report_period_cqi_ms", "report_period_sinr_ms", "report_period_rsrp_ms"):
            period = getattr(self, name)
            if period <= 0:
                raise ValueError(f"{name} must be positive")
            timing.ms_to_ticks(period)
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration_s * 1000.0 / timing.TICK_MS))


@dataclass
class RawTelemetryLog:
    """Time-ordered heterogeneous records in columnar form.

    ``kind`` selects the record type; ``fields`` holds up to three values per
    record laid out as in ``RECORD_FIELDS`` (unused slots are NaN).
    """

    tick: np.ndarray
    kind: np.ndarray
    fields: np.ndarray

    def __len__(self):
        return len(self.tick)

    def select(self, kind: int):
        mask = self.kind == kind
        return self.tick[mask], self.fields[mask]

    @classmethod
    def from_records(cls, records) -> "RawTelemetryLog":
        """Build a log from ``(tick, record_name, {field: value})`` tuples, kept in the given order."""
        ticks, kinds, fields = [], [], []
        for t, name, vals in records:
            k = _KIND_BY_NAME[name]
            row = [float(vals[f]) for f in RECORD_FIELDS[k]]
            ticks.append(int(t))
            kinds.append(k)
            fields.append(row + [math.nan] * (3 - len(row)))
        return cls(np.array(ticks, dtype=np.int64), np.array(kinds, dtype=np.int8),
                   np.array(fields, dtype=float).reshape(-1, 3))

    def records(self):
        """Iterate ``(tick, record_name, {field: value})`` tuples."""
        for t, k, f in zip(self.tick.tolist(), self.kind.tolist(), self.fields.tolist()):
            names = RECORD_FIELDS[k]
            vals = {n: (int(v) if k in _INT_KINDS else v) for n, v in zip(names, f)}
            yield t, RECORD_NAMES[k], vals


def sinr_to_bler(sinr_db, mcs):
    """Block error rate of ``mcs`` at ``sinr_db`` on the logistic link curve."""
    mcs_arr = np.asarray(mcs)
    if np.any((mcs_arr < 0) | (mcs_arr > N_MCS - 1)) or not np.issubdtype(mcs_arr.dtype, np.integer):
        raise ValueError(f"mcs must be an integer in [0, {N_MCS - 1}], got {mcs!r}")
    x = BLER_SLOPE_PER_DB * (np.asarray(sinr_db, dtype=float) - MCS_THRESH_DB[mcs_arr])
    # 1 / (1 + e^x) without overflow
    out = np.exp(-np.logaddexp(0.0, x))
    return float(out) if np.ndim(out) == 0 else out


def cqi_to_sinr_db(cqi):
    return CQI_BASE_DB + CQI_STEP_DB * np.asarray(cqi, dtype=float)


def sinr_to_cqi(sinr_db):
    return np.clip(np.floor((np.asarray(sinr_db) - CQI_BASE_DB) / CQI_STEP_DB), 0, 15).astype(np.int64)


# SINR at which each MCS reaches 10% BLER on the reference curve
_MCS_SINR_AT_10PCT = (MCS_THRESH_DB + math.log(9.0) / BLER_SLOPE_PER_DB).tolist()


def scheduler_select_mcs(cqi: int, olla_offset_db: float) -> int:
    """Highest MCS whose 10%-BLER point lies at or below the effective SINR."""
    cqi = min(max(int(cqi), 0), 15)
    eff = CQI_BASE_DB + CQI_STEP_DB * cqi + olla_offset_db
    m = bisect.bisect_right(_MCS_SINR_AT_10PCT, eff) - 1
    return min(max(m, 0), N_MCS - 1)


def _ar1(rng, n, rho, std):
    """Stationary AR(1) with lag-one correlation ``rho`` and marginal ``std``."""
    if n == 0:
        return np.zeros(0)
    innov = rng.standard_normal(n) * std * math.sqrt(1.0 - rho * rho)
    innov[0] = rng.standard_normal() * std
    return lfilter([1.0], [1.0, -rho], innov)


def _mobility_profile(rng, cfg: ChannelSimConfig, n):
    """Non-negative SINR loss (dB) from abrupt drops with linear recovery."""
    loss = np.zeros(n)
    if cfg.mobility_events_per_min <= 0:
        return loss
    ticks_per_min = 60_000.0 / timing.TICK_MS
    mean_gap = ticks_per_min / cfg.mobility_events_per_min
    t = 0.0
    ramp = max(1, int(round(cfg.drop_recovery_s * 1000 / timing.TICK_MS)))
    while True:
        t += rng.exponential(mean_gap)
        start = int(t)
        if start >= n:
            break
        depth = rng.uniform(*cfg.drop_depth_db)
        hold = int(rng.exponential(cfg.drop_hold_s * 1000 / timing.TICK_MS)) + 1
        shape = np.concatenate([np.full(hold, depth), np.linspace(depth, 0.0, ramp + 1)[1:]])
        end = min(n, start + len(shape))
        np.maximum(loss[start:end], shape[: end - start], out=loss[start:end])
    return loss


def _periodic_mean(x, period):
    """Mean of ``x`` over the trailing ``period`` samples, at every sample."""
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - period, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def generate_trace(config: ChannelSimConfig) -> RawTelemetryLog:
    """Simulate one telemetry trace; a pure function of ``config`` (seed included)."""
    return simulate(config)[0]


def simulate(config: ChannelSimConfig) -> tuple[RawTelemetryLog, np.ndarray]:
    """Like ``generate_trace`` but also returns the true SINR of every PDSCH slot."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_ticks
    dt_ms = timing.TICK_MS

    shadow = _ar1(rng, n, math.exp(-dt_ms / (cfg.shadow_corr_s * 1000.0)), cfg.sinr_shadow_std_db)
    fast = _ar1(rng, n, math.exp(-dt_ms / cfg.coherence_ms), cfg.fast_fading_std_db)
    drops = _mobility_profile(rng, cfg, n)
    slow = shadow - drops
    true_sinr = cfg.sinr_mean_db + slow + fast

    # CQI: noisy measurement, quantized, +-1 reporting jitter
    cqi_period = timing.ms_to_ticks(cfg.report_period_cqi_ms)
    cqi_ticks = np.arange(0, n, cqi_period)
    meas = true_sinr[cqi_ticks] + rng.normal(0.0, 1.0, len(cqi_ticks))
    jitter = rng.choice(np.array([-1, 0, 1]), size=len(cqi_ticks), p=[0.2, 0.6, 0.2])
    cqi_vals = np.clip(sinr_to_cqi(meas) + jitter, 0, 15)

    # SINR reports average the last period
    sinr_period = timing.ms_to_ticks(cfg.report_period_sinr_ms)
    sinr_ticks = np.arange(0, n, sinr_period)
    avg_sinr = _periodic_mean(true_sinr, sinr_period)[sinr_ticks]
    ss_sinr = np.round(avg_sinr + rng.normal(0.0, 0.8, len(sinr_ticks)), 1)
    csi_sinr = np.round(avg_sinr - 0.5 + rng.normal(0.0, 1.5, len(sinr_ticks)), 1)

    rsrp_period = timing.ms_to_ticks(cfg.report_period_rsrp_ms)
    rsrp_ticks = np.arange(0, n, rsrp_period)
    rsrp_true = cfg.rsrp_mean_dbm + _periodic_mean(slow, rsrp_period)[rsrp_ticks]
    ss_rsrp = np.clip(np.round(rsrp_true + rng.normal(0.0, 1.0, len(rsrp_ticks)), 1), RSRP_MIN_DBM, RSRP_MAX_DBM)
    csi_rsrp = np.clip(np.round(rsrp_true - 1.5 + rng.normal(0.0, 1.5, len(rsrp_ticks)), 1), RSRP_MIN_DBM, RSRP_MAX_DBM)

    # downlink scheduling with OLLA
    dl = timing.dl_ticks(n)
    delay = timing.ms_to_ticks(cfg.cqi_feedback_delay_ms)
    # index of the latest CQI report visible to the scheduler at each DL tick
    cqi_idx = np.searchsorted(cqi_ticks, dl - delay, side="right") - 1
    sched_cqi = np.where(cqi_idx >= 0, cqi_vals[np.maximum(cqi_idx, 0)], 0).tolist()
    u = rng.random(len(dl)).tolist()
    num_rb = np.where(rng.random(len(dl)) < 0.9, cfg.max_rb, rng.integers(cfg.max_rb // 2, cfg.max_rb, len(dl)))
    s_dl = true_sinr[dl].tolist()

    down = cfg.olla_down_step_db
    up = down * cfg.olla_target_bler / (1.0 - cfg.olla_target_bler)
    thresh = MCS_THRESH_DB.tolist()
    slope = BLER_SLOPE_PER_DB
    offset = 0.0
    mcs = np.empty(len(dl), dtype=np.int64)
    crc = np.empty(len(dl), dtype=np.int64)
    for i in range(len(dl)):
        m = scheduler_select_mcs(sched_cqi[i], offset)
        x = slope * (s_dl[i] - thresh[m])
        bler = 1.0 / (1.0 + math.exp(x)) if x < 700 else 0.0
        ok = u[i] >= bler
        mcs[i] = m
        crc[i] = ok
        if ok:
            offset = min(offset + up, 10.0)
        else:
            offset = max(offset - down, -15.0)

    parts = [
        (np.array([0]), PCI, np.array([[cfg.pci, np.nan, np.nan]], dtype=float)),
        (rsrp_ticks, RSRP, np.column_stack([ss_rsrp, csi_rsrp, np.full(len(rsrp_ticks), np.nan)])),
        (sinr_ticks, SINR, np.column_stack([ss_sinr, csi_sinr, np.full(len(sinr_ticks), np.nan)])),
        (cqi_ticks, CSF, np.column_stack([cqi_vals, np.full((len(cqi_ticks), 2), np.nan)])),
        (dl, PDSCH, np.column_stack([mcs, num_rb, crc]).astype(float)),
    ]
    tick = np.concatenate([p[0] for p in parts]).astype(np.int64)
    kind = np.concatenate([np.full(len(p[0]), p[1], dtype=np.int8) for p in parts])
    fields = np.concatenate([p[2] for p in parts])
    order = np.lexsort((kind, tick))
    return RawTelemetryLog(tick[order], kind[order], fields[order]), true_sinr[dl]


def _fmt(v, as_int):
    if v != v:  # NaN
        return ""
    return str(int(v)) if as_int else repr(float(v))


def write_log_csv(log: RawTelemetryLog, path, comments=()) -> None:
    """Write ``tick,record_type,field1,field2,field3`` rows (ticks in 0.5 ms units).

    Each entry of ``comments`` becomes a leading ``# ...`` line.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.writelines(f"# {c}\n" for c in comments)
        fh.write(",".join(CSV_HEADER) + "\n")
        lines = []
        for t, k, f in zip(log.tick.tolist(), log.kind.tolist(), log.fields.tolist()):
            as_int = k in _INT_KINDS
            lines.append(f"{t},{RECORD_NAMES[k]},{_fmt(f[0], as_int)},{_fmt(f[1], as_int)},{_fmt(f[2], as_int)}\n")
            if len(lines) >= 100_000:
                fh.writelines(lines)
                lines.clear()
        fh.writelines(lines)


def read_log_csv(path) -> RawTelemetryLog:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None or tuple(header[:2]) != CSV_HEADER[:2]:
            raise ValueError(f"{path}: missing or malformed telemetry header")
        ticks, kinds, fields = [], [], []
        for row in reader:
            if not row:
                continue
            ticks.append(int(row[0]))
            try:
                kinds.append(_KIND_BY_NAME[row[1]])
            except KeyError:
                raise ValueError(f"{path}: unknown record type {row[1]!r}") from None
            vals = [float(v) if v != "" else math.nan for v in row[2:5]]
            vals += [math.nan] * (3 - len(vals))
            fields.append(vals)
    return RawTelemetryLog(
        np.array(ticks, dtype=np.int64),
        np.array(kinds, dtype=np.int8),
        np.array(fields, dtype=float).reshape(-1, 3),
    )


def empirical_bler(log: RawTelemetryLog) -> float:
    _, f = log.select(PDSCH)
    return float(1.0 - f[:, 2].mean()) if len(f) else math.nan
