"""Trace-driven GOP scheduler simulation and the four-metric comparison.

Every GOP gets one MCS per policy, decided from the 40 slots ending at the
anchor that precedes the GOP by the configured delay, and held for the whole
GOP. The ground truth is the highest MCS meeting the success threshold on the
GOP's own slots; GOPs whose ground truth is OUTAGE are only counted.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channelsim import N_MCS
from .features import MCS_COL, WINDOW_SLOTS, Normalizer
from .ingest import SlotTable, gap_violation_prefix
from .labels import OUTAGE, HorizonSpec, horizon_counts, highest_at_least
from .model import ModelParams, forward
from .timing import TICK_MS

PROPOSED, LRA, MAW, DETERMINISTIC, MSE_T = "PROPOSED", "LRA", "MAW", "DETERMINISTIC", "MSE_T"
POLICY_ORDER = (PROPOSED, LRA, MAW, DETERMINISTIC, MSE_T)
MODEL_KINDS = (PROPOSED, DETERMINISTIC, MSE_T)
DEFAULT_THRESHOLD = {PROPOSED: 0.9, MSE_T: 0.9, DETERMINISTIC: 0.5}
DISPLAY_NAME = {PROPOSED: "Proposed", LRA: "LRA", MAW: "MAW", DETERMINISTIC: "Deterministic", MSE_T: "MSE-T"}


class TraceTooShortError(ValueError):
    pass


class NoDataError(ValueError):
    pass


@dataclass
class Policy:
    kind: str
    threshold: float | None = None
    params: ModelParams | None = None
    normalizer: Normalizer | None = None
    name: str | None = None
    mcs: int | None = None  # CONSTANT policies only

    def __post_init__(self):
        if self.kind not in POLICY_ORDER and self.kind != "CONSTANT":
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.threshold is None:
            self.threshold = DEFAULT_THRESHOLD.get(self.kind)
        if self.kind in MODEL_KINDS and self.params is None:
            raise ValueError(f"{self.kind} policy needs model parameters")
        if self.name is None:
            self.name = self.kind

    @classmethod
    def constant(cls, mcs: int, name: str = "CONSTANT") -> "Policy":
        return cls("CONSTANT", name=name, mcs=int(mcs))


@dataclass
class GopDecision:
    gop_index: int
    decision_anchor: int
    selected_mcs: int
    gt_mcs: int


@dataclass
class MetricRow:
    rmse: float
    reliability_pct: float
    avg_bias: float
    mae: float
    n_gops: int
    n_outage_gops: int


@dataclass
class EvalReport:
    rows: dict = field(default_factory=dict)

    def write_csv(self, path, comments=()) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.writelines(f"# {c}\n" for c in comments)
            w = csv.writer(fh)
            w.writerow(["policy", "rmse", "reliability_pct", "avg_bias", "mae", "n_gops", "n_outage_gops"])
            for name, r in self.rows.items():
                w.writerow([name, f"{r.rmse:.6f}", f"{r.reliability_pct:.4f}", f"{r.avg_bias:.6f}",
                            f"{r.mae:.6f}", r.n_gops, r.n_outage_gops])

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        rep = cls()
        with Path(path).open(newline="") as fh:
            for r in csv.DictReader(line for line in fh if not line.startswith("#")):
                rep.rows[r["policy"]] = MetricRow(float(r["rmse"]), float(r["reliability_pct"]),
                                                  float(r["avg_bias"]), float(r["mae"]),
                                                  int(r["n_gops"]), int(r["n_outage_gops"]))
        return rep

    def to_text(self) -> str:
        head = f"{'Method':<16}{'RMSE':>10}{'Reliability':>14}{'Avg. Bias':>12}{'MAE':>10}{'GOPs':>7}"
        lines = [head, "-" * len(head)]
        for name, r in self.rows.items():
            lines.append(f"{DISPLAY_NAME.get(name, name):<16}{r.rmse:>10.4f}{r.reliability_pct:>13.2f}%"
                         f"{r.avg_bias:>12.4f}{r.mae:>10.4f}{r.n_gops:>7d}")
        return "\n".join(lines) + "\n"


def _inverse_mcs(policy: Policy, window: np.ndarray, raw_window) -> np.ndarray:
    """Integer MCS column of a window, recovered from the normalized features when possible."""
    if policy.normalizer is not None:
        col = window[..., MCS_COL] * policy.normalizer.std[MCS_COL] + policy.normalizer.mean[MCS_COL]
        return np.rint(col)
    if raw_window is None:
        raise ValueError(f"{policy.kind} needs a normalizer or the raw window")
    return np.asarray(raw_window, dtype=float)[..., MCS_COL]


def _select(prob, threshold):
    k = highest_at_least(prob, threshold)
    return 0 if k == OUTAGE else k


def decide(policy: Policy, window, raw_window=None) -> int:
    """MCS a policy picks for the upcoming GOP, given the window at the decision anchor."""
    window = np.asarray(window, dtype=float)
    if policy.kind in MODEL_KINDS:
        prob, _ = forward(policy.params, window, with_cache=False)
        return _select(prob, policy.threshold)
    if policy.kind == "CONSTANT":
        return policy.mcs
    mcs = _inverse_mcs(policy, window, raw_window)
    if policy.kind == LRA:
        v = mcs[-1]
    else:
        v = np.round(mcs.mean())  # half-to-even
    return int(np.clip(v, 0, N_MCS - 1))


def decide_batch(policy: Policy, windows, raw_windows=None) -> np.ndarray:
    """Vectorized ``decide`` over stacked windows."""
    windows = np.asarray(windows, dtype=float)
    n = len(windows)
    if policy.kind in MODEL_KINDS:
        probs = np.concatenate([forward(policy.params, windows[i:i + 4096], with_cache=False)[0]
                                for i in range(0, n, 4096)]) if n else np.zeros((0, N_MCS))
        return np.array([_select(p, policy.threshold) for p in probs], dtype=np.int64)
    if policy.kind == "CONSTANT":
        return np.full(n, policy.mcs, dtype=np.int64)
    mcs = _inverse_mcs(policy, windows, raw_windows)
    v = mcs[:, -1] if policy.kind == LRA else np.round(mcs.mean(axis=1))
    return np.clip(v, 0, N_MCS - 1).astype(np.int64)


def compute_metrics(decisions) -> MetricRow:
    sel = np.array([d.selected_mcs for d in decisions], dtype=float)
    gt = np.array([d.gt_mcs for d in decisions], dtype=float)
    ok = gt != OUTAGE
    if not ok.any():
        raise NoDataError("no GOP with a defined ground truth")
    e = sel[ok] - gt[ok]
    return MetricRow(
        rmse=float(np.sqrt(np.mean(e * e))),
        reliability_pct=float(100.0 * np.mean(e <= 0)),
        avg_bias=float(np.mean(e)),
        mae=float(np.mean(np.abs(e))),
        n_gops=int(ok.sum()),
        n_outage_gops=int((~ok).sum()),
    )


def gop_anchors(table: SlotTable, spec: HorizonSpec, seq_len: int = WINDOW_SLOTS):
    """Decision anchors of every complete GOP, plus the number skipped for wide gaps."""
    n = len(table)
    first = seq_len - 1
    last = n - 1 - spec.delay_dl_slots - spec.gop_dl_slots
    if last < first:
        raise TraceTooShortError(
            f"{n} slots cannot hold {seq_len} + {spec.delay_dl_slots} + {spec.gop_dl_slots}")
    a = np.arange(first, last + 1, spec.gop_dl_slots, dtype=np.int64)
    c = gap_violation_prefix(table)
    clean = c[a + spec.delay_dl_slots + spec.gop_dl_slots + 1] - c[a - seq_len + 2] == 0
    return a, a[clean], int((~clean).sum())


def run_simulation(table: SlotTable, features: np.ndarray, policies, normalizer: Normalizer,
                   spec: HorizonSpec = HorizonSpec(), gt_threshold: float = 0.9,
                   seq_len: int = WINDOW_SLOTS):
    """Simulate GOP-paced decisions for each policy over one test trace.

    ``features`` are the unnormalized per-slot features of ``table``.
    Returns ``({policy name: [GopDecision]}, EvalReport)``.
    """
    all_anchors, anchors, _ = gop_anchors(table, spec, seq_len)
    gop_ids = np.searchsorted(all_anchors, anchors)
    S, T = horizon_counts(table, anchors, spec)
    with np.errstate(invalid="ignore", divide="ignore"):
        prob = np.where(T > 0, S / np.maximum(T, 1), np.nan)
    gt = np.array([highest_at_least(p, gt_threshold) for p in prob], dtype=np.int64)
    offs = np.arange(-seq_len + 1, 1)
    raw = features[anchors[:, None] + offs[None, :]]
    norm = normalizer.apply(raw)
    decisions, report = {}, EvalReport()
    for pol in policies:
        sel = decide_batch(pol, norm, raw)
        ds = [GopDecision(int(g), int(a), int(s), int(t)) for g, a, s, t in zip(gop_ids, anchors, sel, gt)]
        decisions[pol.name] = ds
        report.rows[pol.name] = compute_metrics(ds)
    return decisions, report


def merge_decisions(parts) -> dict:
    """Concatenate per-trace decision lists policy by policy."""
    out = {}
    for part in parts:
        for name, ds in part.items():
            out.setdefault(name, []).extend(ds)
    return out


def report_from_decisions(decisions: dict) -> EvalReport:
    return EvalReport({name: compute_metrics(ds) for name, ds in decisions.items()})


def bench_inference(params: ModelParams, n_iters: int = 1000, seed: int = 0, warmup: int = 50) -> dict:
    """Wall-clock latency of single-window forward passes."""
    rng = np.random.default_rng(seed)
    cfg = params.config
    x = rng.standard_normal((cfg.seq_len, cfg.in_features))
    for _ in range(warmup):
        forward(params, x, with_cache=False)
    times = []
    for _ in range(n_iters):
        t0 = time.perf_counter()
        forward(params, x, with_cache=False)
        times.append((time.perf_counter() - t0) * 1000.0)
    mean = statistics.fmean(times)
    sd = statistics.stdev(times) if len(times) > 1 else 0.0
    return {"n_iters": n_iters, "mean_ms": mean, "sd_ms": sd, "pct_of_tti": mean / TICK_MS * 100.0}
