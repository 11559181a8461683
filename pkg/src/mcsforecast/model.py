"""Lightweight pre-LN Transformer encoder emitting 28 success probabilities.

Pure numpy. ``forward`` caches the activations that ``backward`` needs; the
gradient comes back as one flat vector laid out like ``ModelParams.flat``.

Layout: input projection -> learnable positional embedding -> N encoder
layers (LN -> multi-head self-attention -> residual, LN -> GELU FF ->
residual) -> final LN -> mean pool over time -> GELU MLP -> logistic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 40
    in_features: int = 12
    d_model: int = 8
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 32
    out_dim: int = 28
    decoder_hidden: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.out_dim != 28:
            raise ValueError("out_dim is fixed at 28 MCS indices")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("in_w", (cfg.in_features, d)), ("in_b", (d,)), ("pos", (cfg.seq_len, d))]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        shapes += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "q_w", (d, d)), (p + "q_b", (d,)),
            (p + "k_w", (d, d)), (p + "k_b", (d,)),
            (p + "v_w", (d, d)), (p + "v_b", (d,)),
            (p + "o_w", (d, d)), (p + "o_b", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "ff1_w", (d, f)), (p + "ff1_b", (f,)),
            (p + "ff2_w", (f, d)), (p + "ff2_b", (d,)),
        ]
    shapes += [
        ("lnf_g", (d,)), ("lnf_b", (d,)),
        ("dec1_w", (d, cfg.decoder_hidden)), ("dec1_b", (cfg.decoder_hidden,)),
        ("dec2_w", (cfg.decoder_hidden, cfg.out_dim)), ("dec2_b", (cfg.out_dim,)),
    ]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def _views(flat: np.ndarray, cfg: ModelConfig) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for name, shape in param_shapes(cfg):
        n = int(np.prod(shape))
        out[name] = flat[i:i + n].reshape(shape)
        i += n
    return out


class ModelParams:
    """Trainable tensors as named views into one flat float64 vector."""

    def __init__(self, config: ModelConfig, flat: np.ndarray | None = None):
        self.config = config
        n = param_count(config)
        if flat is None:
            flat = np.zeros(n)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {flat.shape}")
        self.flat = flat
        self.tensors = _views(self.flat, config)
        self.version = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.flat.copy())

    def touch(self) -> None:
        """Mark the parameters as modified in place (invalidates caches)."""
        self.version += 1

    def decay_mask(self) -> np.ndarray:
        """1 for linear weight matrices, 0 for biases, norm parameters and positions."""
        mask = np.zeros_like(self.flat)
        for name, view in _views(mask, self.config).items():
            if name.endswith("_w"):
                view[...] = 1.0
        return mask


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0, zero: bool = False) -> ModelParams:
    """Fan-in uniform weights, zero biases and positions, unit norm gains.

    ``zero=True`` leaves every linear weight at zero as well.
    """
    params = ModelParams(config)
    rng = np.random.default_rng(seed)
    for name, shape in param_shapes(config):
        t = params[name]
        if name.endswith("_g"):
            t[...] = 1.0
        elif name.endswith("_w") and not zero:
            bound = 1.0 / np.sqrt(shape[0])
            t[...] = rng.uniform(-bound, bound, size=shape)
    return params


def _gelu(x):
    cdf = ndtr(x)
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _row_mean(x):
    # matmul against an averaging column beats .mean(axis=-1) on tiny trailing axes
    return x @ np.full((x.shape[-1], 1), 1.0 / x.shape[-1])


def _layer_norm(x, g, b):
    xc = x - _row_mean(x)
    rstd = 1.0 / np.sqrt(_row_mean(xc * xc) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_back(dout, g, cache):
    xhat, rstd = cache
    d2 = dout.reshape(-1, dout.shape[-1])
    dg = (d2 * xhat.reshape(d2.shape)).sum(axis=0)
    db = d2.sum(axis=0)
    dx_hat = dout * g
    dx = rstd * (dx_hat - _row_mean(dx_hat) - xhat * _row_mean(dx_hat * xhat))
    return dx, dg, db


def _linear_back(dout, x, w):
    """Gradients of ``y = x @ w + b`` flattened over leading axes."""
    d_in, d_out = w.shape
    x2 = x.reshape(-1, d_in)
    d2 = dout.reshape(-1, d_out)
    return (d2 @ w.T).reshape(x.shape), x2.T @ d2, d2.sum(axis=0)


class ForwardCache:
    __slots__ = ("params_id", "version", "single", "store", "y")

    def __init__(self, params, single):
        self.params_id = id(params)
        self.version = params.version
        self.single = single
        self.store = {}
        self.y = None


def forward(params: ModelParams, window, with_cache: bool = True):
    """Success probabilities for one ``(40, 12)`` window or a ``(B, 40, 12)`` batch.

    Returns ``(probs, cache)``; ``cache`` is None when ``with_cache`` is False.
    """
    cfg = params.config
    x = np.asarray(window, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.in_features):
        raise ValueError(f"window must have shape ({cfg.seq_len}, {cfg.in_features}), got {np.shape(window)}")
    P = params.tensors
    cache = ForwardCache(params, single) if with_cache else None
    st = cache.store if with_cache else {}
    B, L, D, H, dh = x.shape[0], cfg.seq_len, cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)

    st["x"] = x
    h = x @ P["in_w"] + P["in_b"] + P["pos"]
    for i in range(cfg.n_layers):
        p = f"l{i}."
        a, ln1 = _layer_norm(h, P[p + "ln1_g"], P[p + "ln1_b"])
        q = (a @ P[p + "q_w"] + P[p + "q_b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        k = (a @ P[p + "k_w"] + P[p + "k_b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        v = (a @ P[p + "v_w"] + P[p + "v_b"]).reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s -= s.max(axis=-1, keepdims=True)
        att = np.exp(s)
        att /= att.sum(axis=-1, keepdims=True)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
        h = h + ctx @ P[p + "o_w"] + P[p + "o_b"]
        c, ln2 = _layer_norm(h, P[p + "ln2_g"], P[p + "ln2_b"])
        u = c @ P[p + "ff1_w"] + P[p + "ff1_b"]
        gu, cdf = _gelu(u)
        h = h + gu @ P[p + "ff2_w"] + P[p + "ff2_b"]
        if with_cache:
            st[p] = (ln1, a, q, k, v, att, ctx, ln2, c, u, gu, cdf)
    hf, lnf = _layer_norm(h, P["lnf_g"], P["lnf_b"])
    pooled = hf.mean(axis=1)
    d1 = pooled @ P["dec1_w"] + P["dec1_b"]
    z, zcdf = _gelu(d1)
    logits = z @ P["dec2_w"] + P["dec2_b"]
    y = 1.0 / (1.0 + np.exp(-logits))
    if with_cache:
        st["head"] = (lnf, pooled, d1, z, zcdf)
        cache.y = y
    return (y[0] if single else y), cache


def backward(params: ModelParams, cache: ForwardCache, output_gradient) -> np.ndarray:
    """Flat gradient of ``sum(output_gradient * probs)`` with respect to every parameter."""
    if cache is None or cache.params_id != id(params) or cache.version != params.version:
        raise StaleCacheError("cache does not belong to the current parameters; rerun forward")
    cfg = params.config
    P = params.tensors
    st = cache.store
    dy = np.asarray(output_gradient, dtype=np.float64)
    if cache.single:
        dy = dy[None]
    y = cache.y
    if dy.shape != y.shape:
        raise ValueError(f"output_gradient shape {dy.shape} does not match outputs {y.shape}")
    grad = np.zeros_like(params.flat)
    G = _views(grad, cfg)
    B, L, D, H, dh = y.shape[0], cfg.seq_len, cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)

    lnf, pooled, d1, z, zcdf = st["head"]
    dlogit = dy * y * (1.0 - y)
    dz, G["dec2_w"][...], G["dec2_b"][...] = _linear_back(dlogit, z, P["dec2_w"])
    dd1 = dz * _gelu_grad(d1, zcdf)
    dpool, G["dec1_w"][...], G["dec1_b"][...] = _linear_back(dd1, pooled, P["dec1_w"])
    dhf = np.broadcast_to(dpool[:, None, :] / L, (B, L, D))
    dh_, G["lnf_g"][...], G["lnf_b"][...] = _layer_norm_back(dhf, P["lnf_g"], lnf)

    for i in reversed(range(cfg.n_layers)):
        p = f"l{i}."
        ln1, a, q, k, v, att, ctx, ln2, c, u, gu, cdf = st[p]
        # feed-forward block
        dgu, G[p + "ff2_w"][...], G[p + "ff2_b"][...] = _linear_back(dh_, gu, P[p + "ff2_w"])
        du = dgu * _gelu_grad(u, cdf)
        dc, G[p + "ff1_w"][...], G[p + "ff1_b"][...] = _linear_back(du, c, P[p + "ff1_w"])
        dx, G[p + "ln2_g"][...], G[p + "ln2_b"][...] = _layer_norm_back(dc, P[p + "ln2_g"], ln2)
        dh_ = dh_ + dx
        # attention block
        dctx, G[p + "o_w"][...], G[p + "o_b"][...] = _linear_back(dh_, ctx, P[p + "o_w"])
        dctx = dctx.reshape(B, L, H, dh).transpose(0, 2, 1, 3)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        da = np.zeros_like(a)
        for name, dt in (("q", dq), ("k", dk), ("v", dv)):
            dt = dt.transpose(0, 2, 1, 3).reshape(B, L, D)
            dpart, G[p + name + "_w"][...], G[p + name + "_b"][...] = _linear_back(dt, a, P[p + name + "_w"])
            da += dpart
        dx, G[p + "ln1_g"][...], G[p + "ln1_b"][...] = _layer_norm_back(da, P[p + "ln1_g"], ln1)
        dh_ = dh_ + dx

    G["pos"][...] = dh_.sum(axis=0)
    _, G["in_w"][...], G["in_b"][...] = _linear_back(dh_, st["x"], P["in_w"])
    return grad


# --- checkpoint file ----------------------------------------------------------
#
# b"MCSFCKPT" | uint32 format version | uint32 header length | UTF-8 JSON header
# (model config + metadata) | uint64 parameter count | float64[count]
# All integers and floats little-endian.

_CKPT_MAGIC = b"MCSFCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    header = json.dumps({"config": asdict(params.config), "meta": meta or {}}, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.flat.size))
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    (n,) = struct.unpack_from("<Q", data, 16 + hlen)
    flat = np.frombuffer(data, dtype="<f8", count=n, offset=24 + hlen).astype(np.float64)
    return ModelParams(ModelConfig(**header["config"]), flat), header["meta"]
