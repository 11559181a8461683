"""TDD slot accounting for the 30 kHz SCS, 7/2 + special frame layout.

One tick is one 0.5 ms slot. A 10-slot (5 ms) period is laid out as
``DDDDDDDSUU``; the special slot carries downlink data, so 8 of every 10
slots are downlink-capable.
"""

from __future__ import annotations

import numpy as np

TICK_MS = 0.5
TDD_PERIOD_SLOTS = 10
DL_POSITIONS = (0, 1, 2, 3, 4, 5, 6, 7)
DL_SLOTS_PER_PERIOD = len(DL_POSITIONS)

_IS_DL = np.zeros(TDD_PERIOD_SLOTS, dtype=bool)
_IS_DL[list(DL_POSITIONS)] = True
# ordinal of each DL position inside its period, -1 for uplink
_DL_RANK = np.cumsum(_IS_DL) - 1
_DL_RANK[~_IS_DL] = -1


def ms_to_ticks(ms: float) -> int:
    ticks = ms / TICK_MS
    if abs(ticks - round(ticks)) > 1e-9:
        raise ValueError(f"{ms} ms is not a multiple of the {TICK_MS} ms slot")
    return int(round(ticks))


def ms_to_dl_slots(ms: float) -> int:
    """Downlink slots in a span of ``ms`` milliseconds (whole TDD periods)."""
    ticks = ms_to_ticks(ms)
    if ticks % TDD_PERIOD_SLOTS:
        raise ValueError(f"{ms} ms is not a whole number of TDD periods")
    return ticks // TDD_PERIOD_SLOTS * DL_SLOTS_PER_PERIOD


def is_dl_tick(tick):
    return _IS_DL[np.asarray(tick) % TDD_PERIOD_SLOTS]


def dl_ordinal(tick):
    """Running count of downlink slots before ``tick`` (0-based DL index).

    Only meaningful for downlink ticks.
    """
    tick = np.asarray(tick, dtype=np.int64)
    return (tick // TDD_PERIOD_SLOTS) * DL_SLOTS_PER_PERIOD + _DL_RANK[tick % TDD_PERIOD_SLOTS]


def dl_ticks(n_ticks: int) -> np.ndarray:
    """All downlink ticks in ``[0, n_ticks)``."""
    t = np.arange(n_ticks, dtype=np.int64)
    return t[_IS_DL[t % TDD_PERIOD_SLOTS]]
