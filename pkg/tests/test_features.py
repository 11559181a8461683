import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcsforecast import features as F
from mcsforecast.timing import dl_ticks

from conftest import make_table


def test_feature_order():
    assert F.N_FEATURES == 12
    assert F.FEATURE_NAMES[F.MCS_COL] == "mcs"
    assert F.FEATURE_NAMES[8:] == ("consecutive_nacks", "time_since_last_nack", "mcs_trend", "cqi_trend")


def test_counters_example():
    nacks, since = F.compute_counters([True, True, False, False, True])
    assert nacks.tolist() == [0, 0, 1, 2, 0]
    assert since.tolist() == [1, 2, 0, 0, 1]


def test_counters_all_fail_and_all_pass():
    nacks, since = F.compute_counters([False] * 5)
    assert nacks.tolist() == [1, 2, 3, 4, 5]
    assert since.tolist() == [0] * 5
    nacks, since = F.compute_counters([True] * 4)
    assert nacks.tolist() == [0] * 4
    assert since.tolist() == [1, 2, 3, 4]


@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_counters_match_loop(crc):
    nacks, since = F.compute_counters(crc)
    run, last = 0, None
    for i, ok in enumerate(crc):
        run = 0 if ok else run + 1
        if not ok:
            last = i
        assert nacks[i] == run
        assert since[i] == (i - last if last is not None else i + 1)


def test_trend_of_constant_is_constant():
    assert np.all(F.rolling_mean(np.full(50, 7.0)) == 7.0)


def test_trend_alternating():
    x = np.tile([0.0, 27.0], 20)
    assert F.rolling_mean(x)[-1] == 13.5


def test_trend_first_slot_is_value():
    assert F.rolling_mean([11.0, 3.0])[0] == 11.0
    assert F.rolling_mean([11.0, 3.0])[1] == 7.0


@given(st.lists(st.integers(0, 27), min_size=1, max_size=100))
def test_trend_bounds(xs):
    m = F.rolling_mean(xs)
    x = np.asarray(xs, dtype=float)
    for i in range(len(x)):
        w = x[max(0, i - 15):i + 1]
        assert m[i] == pytest.approx(w.mean())
        assert w.min() - 1e-12 <= m[i] <= w.max() + 1e-12


def test_feature_matrix_columns():
    t = make_table([3, 4, 5], [True, False, True], cqi=[7, 8, 9])
    f = F.feature_matrix(t)
    assert f.shape == (3, 12)
    assert f[:, 1].tolist() == [3, 4, 5]
    assert f[:, 2].tolist() == [1, 0, 1]
    assert f[:, 8].tolist() == [0, 1, 0]
    assert f[:, 9].tolist() == [1, 0, 1]
    assert f[:, 10].tolist() == [3.0, 3.5, 4.0]
    assert f[:, 11].tolist() == [7.0, 7.5, 8.0]


def test_normalizer_degenerate_column():
    x = np.column_stack([np.arange(10.0), np.full(10, 5.0)])
    n = F.fit_normalizer(x)
    z = n.apply(x)
    assert np.all(np.isfinite(z))
    assert np.all(z[:, 1] == 0.0)
    assert n.std[1] == F.STD_FLOOR


def test_normalizer_round_trip(tmp_path, rng):
    x = rng.normal(3.0, 7.0, size=(500, 12))
    n = F.fit_normalizer(x)
    assert np.max(np.abs(n.invert(n.apply(x)) - x)) <= 1e-9
    n.save(tmp_path / "norm.txt", comments=["config_fingerprint=abc"])
    back = F.Normalizer.load(tmp_path / "norm.txt")
    assert np.array_equal(back.mean, n.mean) and np.array_equal(back.std, n.std)
    assert back.names == F.FEATURE_NAMES


def test_normalizer_uses_only_given_rows(rng):
    train = rng.normal(size=(100, 3))
    test = rng.normal(50.0, size=(100, 3))
    n = F.fit_normalizer(train)
    assert np.allclose(n.mean, train.mean(axis=0))
    assert not np.allclose(n.mean, np.concatenate([train, test]).mean(axis=0))


def test_normalizer_needs_two_rows():
    with pytest.raises(ValueError):
        F.fit_normalizer(np.zeros((1, 12)))


def test_window_at_anchor_39(rng):
    t = make_table(rng.integers(0, 28, 100), rng.random(100) < 0.9)
    f = F.feature_matrix(t)
    w = F.extract_window(t, f, 39, None)
    assert w.matrix.shape == (40, 12)
    assert w.anchor_slot == 39
    assert np.array_equal(w.matrix, f[:40])
    with pytest.raises(F.InsufficientHistoryError):
        F.extract_window(t, f, 38, None)


def test_window_tick_span():
    """A clean window covers DL slots anchor-39..anchor, i.e. 5 TDD periods = 25 ms."""
    t = make_table(np.full(200, 5), np.ones(200, bool))
    anchor = 120
    ticks = t.tick[anchor - 39:anchor + 1]
    assert (ticks[-1] - ticks[0] + 1) <= 50
    assert np.array_equal(ticks, dl_ticks(1000)[anchor - 39:anchor + 1])


def test_window_rejects_wide_gap():
    ticks = dl_ticks(1000)
    keep = np.r_[0:50, 70:120]  # 20 missing slots > max_gap 16
    t = make_table(np.full(100, 5), np.ones(100, bool), ticks=ticks[keep])
    f = F.feature_matrix(t)
    F.extract_window(t, f, 49, None)
    with pytest.raises(F.GapViolationError):
        F.extract_window(t, f, 60, None)
    F.extract_window(t, f, 89, None)


def test_window_normalized(rng):
    t = make_table(rng.integers(0, 28, 80), rng.random(80) < 0.9)
    f = F.feature_matrix(t)
    n = F.fit_normalizer(f)
    w = F.extract_window(t, f, 79, n)
    assert np.allclose(w.matrix, (f[40:80] - n.mean) / n.std)


def test_features_are_causal(rng):
    """Changing slot s+1 onward never changes feature rows up to s."""
    mcs = rng.integers(0, 28, 300)
    crc = rng.random(300) < 0.85
    base = F.feature_matrix(make_table(mcs, crc))
    s = 150
    mcs2, crc2 = mcs.copy(), crc.copy()
    mcs2[s + 1:] = 27 - mcs2[s + 1:]
    crc2[s + 1:] = ~crc2[s + 1:]
    other = F.feature_matrix(make_table(mcs2, crc2))
    assert np.array_equal(base[:s + 1], other[:s + 1])
    assert not np.array_equal(base[s + 1:], other[s + 1:])
