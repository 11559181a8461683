import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcsforecast import labels as L
from mcsforecast import training as T
from mcsforecast.features import feature_matrix, fit_normalizer
from mcsforecast.model import ModelConfig

from conftest import make_table


def _label(p_val, valid_idx):
    S = np.zeros(28, int)
    Tr = np.zeros(28, int)
    Tr[valid_idx] = 10
    S[valid_idx] = int(round(p_val * 10))
    return L.LabelVector(S, Tr)


def test_asl_zero_residual():
    lv = L.LabelVector(np.arange(28)[::-1], np.full(28, 27))
    loss, grad = T.loss_asl(lv.prob, lv, 1.4)
    assert loss == 0.0 and np.all(grad == 0.0)


def test_asl_overshoot_example():
    lv = _label(0.5, [4])
    pred = np.full(28, 0.3)
    pred[4] = 0.6
    loss, grad = T.loss_asl(pred, lv, 1.4)
    assert loss == pytest.approx(0.014, abs=1e-15)
    assert grad[4] == pytest.approx(2 * 1.4 * 0.1)
    assert np.count_nonzero(grad) == 1


def test_asl_undershoot_example():
    lv = _label(0.5, [4])
    pred = np.full(28, 0.9)
    pred[4] = 0.4
    loss, _ = T.loss_asl(pred, lv, 1.4)
    assert loss == pytest.approx(0.01, abs=1e-15)


def test_asl_all_invalid_skipped():
    loss, grad = T.loss_asl(np.full(28, 0.5), L.LabelVector(np.zeros(28, int), np.zeros(28, int)))
    assert loss is None and np.all(grad == 0.0)


@given(st.floats(1e-3, 0.5), st.floats(1.0, 4.0))
def test_overshoot_is_lambda_times_undershoot(r, lam):
    target = np.array([[0.5]])
    mask = np.ones((1, 1), bool)
    over, _, _ = T.asl_batch(target + r, target, mask, lam)
    under, _, _ = T.asl_batch(target - r, target, mask, lam)
    assert over == pytest.approx(lam * under, rel=1e-12)


def test_lambda_one_is_mse_bitwise(rng):
    pred = rng.random((64, 28))
    target = rng.random((64, 28))
    mask = rng.random((64, 28)) < 0.6
    mask[3] = False
    a_loss, a_grad, a_n = T.asl_batch(pred, target, mask, 1.0)
    m_loss, m_grad, m_n = T.mse_batch(pred, target, mask)
    assert a_loss == m_loss and a_n == m_n == 63
    assert np.array_equal(a_grad, m_grad)


def test_batch_gradient_matches_difference(rng):
    pred = rng.random((5, 28))
    target = rng.random((5, 28))
    mask = rng.random((5, 28)) < 0.5
    _, grad, _ = T.asl_batch(pred, target, mask, 1.4)
    h = 1e-7
    for i, j in [(0, 0), (1, 5), (4, 27), (2, 13)]:
        p = pred.copy()
        p[i, j] += h
        up = T.asl_batch(p, target, mask, 1.4)[0]
        p[i, j] -= 2 * h
        down = T.asl_batch(p, target, mask, 1.4)[0]
        assert grad[i, j] == pytest.approx((up - down) / (2 * h), abs=1e-7)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(lam=0.9)
    with pytest.raises(ValueError):
        T.TrainConfig(warmup_fraction=1.0)
    with pytest.raises(ValueError):
        T.TrainConfig(loss_kind="L1")


def test_schedule_key_points():
    total = 1000
    assert T.lr_schedule(0, total) == pytest.approx(4e-5, rel=1e-12)
    assert T.lr_schedule(300, total) == 1e-3
    assert T.lr_schedule(total - 1, total) <= 1e-3 / 1e4 + 1e-18
    with pytest.raises(ValueError):
        T.lr_schedule(total, total)


@pytest.mark.parametrize("total", [10, 171, 1000, 1710])
def test_schedule_unimodal_peak_at_warmup(total):
    lrs = np.array([T.lr_schedule(s, total) for s in range(total)])
    peak = int(np.argmax(lrs))
    assert peak == round(0.3 * total)
    assert lrs[peak] == 1e-3
    assert np.all(np.diff(lrs[:peak + 1]) >= 0)
    assert np.all(np.diff(lrs[peak:]) <= 0)


def test_adamw_fixed_point():
    p = np.array([1.0, -2.0])
    T.adamw_step(p, np.zeros(2), T.AdamState.zeros_like(p), 1e-3, 0.0)
    assert p.tolist() == [1.0, -2.0]


def test_adamw_decoupled_decay():
    p = np.array([1.0])
    T.adamw_step(p, np.zeros(1), T.AdamState.zeros_like(p), 1e-3, 1e-2)
    assert p[0] == pytest.approx(0.99999, abs=1e-15)


def test_adamw_decay_mask():
    p = np.array([1.0, 1.0])
    T.adamw_step(p, np.zeros(2), T.AdamState.zeros_like(p), 1e-3, 1e-2, np.array([1.0, 0.0]))
    assert p[1] == 1.0 and p[0] < 1.0


def test_adamw_steady_state_step_is_lr():
    p = np.array([0.0])
    st_ = T.AdamState.zeros_like(p)
    lr = 1e-3
    for _ in range(5000):
        before = p[0]
        T.adamw_step(p, np.array([0.7]), st_, lr, 0.0)
    assert before - p[0] == pytest.approx(lr, rel=1e-6)


def test_adamw_first_step_is_lr():
    p = np.array([0.0])
    T.adamw_step(p, np.array([-3.0]), T.AdamState.zeros_like(p), 1e-3, 0.0)
    assert p[0] == pytest.approx(1e-3, rel=1e-6)


def test_adamw_rejects_non_finite():
    p = np.zeros(3)
    with pytest.raises(T.NonFiniteGradientError, match="index 1"):
        T.adamw_step(p, np.array([0.0, np.nan, 1.0]), T.AdamState.zeros_like(p), 1e-3, 0.0)
    with pytest.raises(ValueError):
        T.adamw_step(p, np.zeros(2), T.AdamState.zeros_like(p), 1e-3, 0.0)


def _toy_splits(seed=0, n=6000):
    """Small learnable dataset: MCS follows a slow sine, CRC fails above a moving limit."""
    rng = np.random.default_rng(seed)
    i = np.arange(n)
    limit = 14 + 8 * np.sin(i / 300.0)
    mcs = np.clip(np.round(limit + rng.normal(0, 2, n)), 0, 27).astype(int)
    crc = rng.random(n) < np.where(mcs <= limit, 0.97, 0.4)
    t = make_table(mcs, crc, cqi=np.clip(np.round(limit / 2), 0, 15))
    f = feature_matrix(t)
    spec = L.HorizonSpec(8, 64)
    norm = fit_normalizer(f[:4000])
    tr = L.make_sample_set(t, f, L.valid_anchors(t, 0, 3999, spec, stride=4), spec)
    va = L.make_sample_set(t, f, L.valid_anchors(t, 4100, n - 1, spec, stride=8), spec)
    return tr, va, norm


def test_lambda_one_training_equals_mse_training(tmp_path):
    tr, va, norm = _toy_splits()
    cfg = dict(epochs=2, batch_size=64, seed=3)
    a = T.train(tr, va, norm, ModelConfig(), T.TrainConfig(loss_kind="ASL", lam=1.0, **cfg), tmp_path / "a.csv")
    b = T.train(tr, va, norm, ModelConfig(), T.TrainConfig(loss_kind="MSE", **cfg), tmp_path / "b.csv")
    assert np.array_equal(a.params.flat, b.params.flat)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_training_reduces_loss_and_logs(tmp_path):
    tr, va, norm = _toy_splits()
    res = T.train(tr, va, norm, ModelConfig(), T.TrainConfig(epochs=6, batch_size=32, seed=1),
                  tmp_path / "log.csv", log_comments=["config_fingerprint=t"])
    rows = T.read_train_log(tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().startswith("# config_fingerprint=t\n")
    assert len(rows) == len(res.log) == 6 * math.ceil(len(tr) / 32)
    assert [r["step"] for r in rows] == list(range(len(rows)))
    vals = [r["val_loss"] for r in rows if not math.isnan(r["val_loss"])]
    assert len(vals) == 6
    assert res.best_val_loss == min(vals)
    first = np.mean([r["train_loss"] for r in rows[:5]])
    last = np.mean([r["train_loss"] for r in rows[-20:]])
    assert last < 0.5 * first
    assert T.evaluate_loss(res.params, va, norm, T.TrainConfig()) == pytest.approx(res.best_val_loss, rel=1e-12)


def test_training_is_reproducible():
    tr, va, norm = _toy_splits()
    cfg = T.TrainConfig(epochs=1, batch_size=128, seed=4)
    a = T.train(tr, va, norm, ModelConfig(), cfg)
    b = T.train(tr, va, norm, ModelConfig(), cfg)
    assert np.array_equal(a.params.flat, b.params.flat)


def test_training_needs_data():
    tr, va, norm = _toy_splits()
    empty = L.SampleSet(tr.anchor[:0], tr.window[:0], tr.S[:0], tr.T[:0], {})
    with pytest.raises(ValueError):
        T.train(empty, va, norm)


def test_divergence_aborts():
    tr, va, norm = _toy_splits()
    bad = L.SampleSet(va.anchor, va.window.copy(), va.S, va.T, {})
    bad.window[0, 0, 0] = np.inf
    with pytest.raises((T.DivergenceError, FloatingPointError)):
        with np.errstate(all="ignore"):
            T.train(tr, bad, norm, ModelConfig(), T.TrainConfig(epochs=1, batch_size=256))
