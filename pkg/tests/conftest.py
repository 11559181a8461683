import numpy as np
import pytest

from mcsforecast import ingest
from mcsforecast.timing import DL_SLOTS_PER_PERIOD, TDD_PERIOD_SLOTS, dl_ticks


def make_table(mcs, crc, cqi=None, ticks=None, max_gap=ingest.DEFAULT_MAX_GAP, sinr=None):
    """Slot table from per-slot MCS/CRC columns; other metrics are simple placeholders."""
    mcs = np.asarray(mcs, dtype=np.int64)
    n = len(mcs)
    if ticks is None:
        ticks = dl_ticks(-(-n // DL_SLOTS_PER_PERIOD) * TDD_PERIOD_SLOTS)[:n]
    cqi = np.full(n, 9, dtype=np.int64) if cqi is None else np.asarray(cqi, dtype=np.int64)
    sinr = np.linspace(5.0, 15.0, n) if sinr is None else np.asarray(sinr, dtype=float)
    return ingest.SlotTable(
        tick=np.asarray(ticks, dtype=np.int64), num_rb=np.full(n, 273, dtype=np.int64), mcs=mcs,
        crc_pass=np.asarray(crc, dtype=bool), ss_rsrp=np.full(n, -95.0), ss_sinr=sinr,
        csi_rsrp=np.full(n, -96.0), csi_sinr=sinr - 0.5, dl_cqi=cqi, pci=np.full(n, 441, dtype=np.int64),
        max_gap=max_gap)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
