"""Asymmetric Safety Loss, OneCycle schedule, AdamW, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Normalizer
from .labels import LabelVector, SampleSet
from .model import ModelConfig, ModelParams, backward, forward, init_params

log = logging.getLogger(__name__)

ASL = "ASL"
MSE = "MSE"


class NonFiniteGradientError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = ASL
    lam: float = 1.4
    batch_size: int = 512
    epochs: int = 10
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.30
    div_start: float = 25.0
    div_final: float = 1e4
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in (ASL, MSE):
            raise ValueError(f"loss_kind must be {ASL!r} or {MSE!r}")
        if self.lam < 1.0:
            raise ValueError("lambda must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


# --- losses -------------------------------------------------------------------

def asl_batch(pred, target, mask, lam: float):
    """Masked asymmetric squared error and its gradient with respect to ``pred``.

    Each sample averages ``w * (pred - target)^2`` over its valid entries, with
    ``w = lam`` on overshoot and 1 otherwise; samples without any valid entry
    are skipped and the rest are averaged. Returns ``(loss, grad, n_used)``;
    ``loss`` is None when nothing in the batch is valid.
    """
    r = pred - target
    w = np.where(r > 0, lam, 1.0)
    m = mask.astype(pred.dtype)
    n_valid = m.sum(axis=-1)
    used = n_valid > 0
    n_used = int(used.sum())
    if n_used == 0:
        return None, np.zeros_like(pred), 0
    denom = np.where(used, n_valid, 1.0)
    per_sample = (w * r * r * m).sum(axis=-1) / denom
    loss = per_sample[used].sum() / n_used
    grad = 2.0 * w * r * m / denom[..., None] / n_used
    return float(loss), grad, n_used


def mse_batch(pred, target, mask):
    """Masked mean squared error, same reduction as ``asl_batch``."""
    r = pred - target
    m = mask.astype(pred.dtype)
    n_valid = m.sum(axis=-1)
    used = n_valid > 0
    n_used = int(used.sum())
    if n_used == 0:
        return None, np.zeros_like(pred), 0
    denom = np.where(used, n_valid, 1.0)
    per_sample = (r * r * m).sum(axis=-1) / denom
    loss = per_sample[used].sum() / n_used
    grad = 2.0 * r * m / denom[..., None] / n_used
    return float(loss), grad, n_used


def loss_asl(pred, label: LabelVector, lam: float = 1.4):
    """Single-sample ASL; returns ``(None, zeros)`` when no entry is valid."""
    pred = np.asarray(pred, dtype=float)
    target = np.nan_to_num(label.prob, nan=0.0)
    loss, grad, _ = asl_batch(pred[None], target[None], label.valid[None], lam)
    return loss, grad[0]


def batch_loss(cfg: TrainConfig, pred, target, mask):
    if cfg.loss_kind == ASL:
        return asl_batch(pred, target, mask, cfg.lam)
    return mse_batch(pred, target, mask)


# --- schedule and optimizer ---------------------------------------------------

def lr_schedule(step: int, total_steps: int, peak_lr: float = 1e-3, warmup_fraction: float = 0.30,
                div_start: float = 25.0, div_final: float = 1e4) -> float:
    """OneCycle: cosine ramp peak/div_start -> peak, then cosine anneal to peak/div_final.

    The peak falls exactly on step ``round(warmup_fraction * total_steps)``.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, final = peak_lr / div_start, peak_lr / div_final
    warm = int(round(warmup_fraction * total_steps))
    if step <= warm:
        if warm == 0:
            return peak_lr
        frac = step / warm
        return start + (peak_lr - start) * (1.0 - math.cos(math.pi * frac)) / 2.0
    tail = total_steps - 1 - warm
    frac = (step - warm) / tail
    return final + (peak_lr - final) * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, x) -> "AdamState":
        return cls(np.zeros_like(x, dtype=float), np.zeros_like(x, dtype=float))


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
               weight_decay: float, decay_mask: np.ndarray | None = None) -> None:
    """One in-place AdamW update: decoupled decay, then bias-corrected Adam."""
    if params.shape != grads.shape:
        raise ValueError("params and grads differ in shape")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteGradientError(
            f"non-finite gradient at step {state.t + 1}: {bad.size} entries, first index {bad[0]}")
    state.t += 1
    decay = lr * weight_decay
    if decay_mask is not None:
        decay = decay * decay_mask
    params -= decay * params
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --- loop -----------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_loss: float
    log: list = field(default_factory=list)


def _batch_arrays(ss: SampleSet, idx, norm: Normalizer):
    x = (ss.window[idx].astype(np.float64) - norm.mean) / norm.std
    T = ss.T[idx].astype(np.float64)
    mask = T > 0
    target = np.where(mask, ss.S[idx] / np.maximum(T, 1.0), 0.0)
    return x, target, mask


def evaluate_loss(params: ModelParams, ss: SampleSet, norm: Normalizer, cfg: TrainConfig,
                  batch_size: int = 2048) -> float:
    total, used = 0.0, 0
    for lo in range(0, len(ss), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(ss)))
        x, target, mask = _batch_arrays(ss, idx, norm)
        pred, _ = forward(params, x, with_cache=False)
        loss, _, n = batch_loss(cfg, pred, target, mask)
        if n:
            total += loss * n
            used += n
    return total / used if used else math.nan


def predict(params: ModelParams, windows, batch_size: int = 2048) -> np.ndarray:
    """Batched inference over already-normalized windows."""
    windows = np.asarray(windows)
    out = [forward(params, windows[lo:lo + batch_size], with_cache=False)[0]
           for lo in range(0, len(windows), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, params.config.out_dim))


def train(train_set: SampleSet, val_set: SampleSet, normalizer: Normalizer,
          model_config: ModelConfig = ModelConfig(), cfg: TrainConfig = TrainConfig(),
          log_path=None, log_comments=()) -> TrainResult:
    """Mini-batch training; keeps the parameters with the lowest validation loss."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(model_config, cfg.seed)
    state = AdamState.zeros_like(params.flat)
    mask_decay = params.decay_mask()
    n_batches = -(-len(train_set) // cfg.batch_size)
    total = cfg.epochs * n_batches
    rows = []
    best = (math.inf, -1, params.flat.copy())
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_set))
        for b in range(n_batches):
            idx = np.sort(perm[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            x, target, mask = _batch_arrays(train_set, idx, normalizer)
            lr = lr_schedule(step, total, cfg.peak_lr, cfg.warmup_fraction, cfg.div_start, cfg.div_final)
            pred, cache = forward(params, x)
            loss, dpred, n = batch_loss(cfg, pred, target, mask)
            if n:
                grad = backward(params, cache, dpred)
                adamw_step(params.flat, grad, state, lr, cfg.weight_decay, mask_decay)
                params.touch()
            rows.append({"step": step, "epoch": epoch, "lr": lr,
                         "train_loss": loss if loss is not None else math.nan, "val_loss": math.nan})
            step += 1
        val = evaluate_loss(params, val_set, normalizer, cfg)
        if not math.isfinite(val):
            raise DivergenceError(f"validation loss became {val} in epoch {epoch}")
        rows[-1]["val_loss"] = val
        log.info("epoch %d  train %.5f  val %.5f", epoch, rows[-1]["train_loss"], val)
        if val < best[0]:
            best = (val, epoch, params.flat.copy())
    if log_path is not None:
        write_train_log(rows, log_path, log_comments)
    return TrainResult(ModelParams(model_config, best[2]), best[1], best[0], rows)


LOG_COLUMNS = ("step", "epoch", "lr", "train_loss", "val_loss")


def write_train_log(rows, path, comments=()) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.writelines(f"# {c}\n" for c in comments)
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"], r["epoch"], repr(r["lr"]), repr(r["train_loss"]),
                        "" if math.isnan(r["val_loss"]) else repr(r["val_loss"])])


def read_train_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "lr": float(r["lr"]),
                 "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]) if r["val_loss"] else math.nan}
                for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
