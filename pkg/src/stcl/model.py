"""The conv-seq2seq forecaster.

Data path for one region window::

    transition patches --STFM--> M' (+ accident encoding) --encoder--> memory
    own in/out flow --embed--> decoder(memory) --head--> next-interval in/out flow

All functions take batched inputs with a leading window axis ``B``; arrays
with shape ``[T, ...]`` are also accepted where noted.
"""
import math
from collections import OrderedDict
from functools import lru_cache

import numpy as np

from stcl.errors import ConfigError, ContractError
from stcl.rng import stream
from stcl.tensorcore import (
    Tensor, conv1d_causal, conv1d_same, dropout, layer_norm, linear, matmul,
    mse_mean, no_grad, relu, softmax_last,
)

MASK_VALUE = -1e9


# -- parameters ------------------------------------------------------------------

def _attention_shapes(prefix, d):
    return [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]


def _norm_shapes(prefix, d):
    return [(f"{prefix}.gamma", (d,)), (f"{prefix}.beta", (d,))]


def _ft_shapes(prefix, cfg):
    d, out = cfg.d_model, []
    for k in cfg.ft_kernel_sizes:
        out += [(f"{prefix}.conv{k}.kernel", (k, d, d)), (f"{prefix}.conv{k}.bias", (d,))]
    out += _norm_shapes(f"{prefix}.norm1", d)
    out += [(f"{prefix}.ffn.w1", (d, cfg.d_f)), (f"{prefix}.ffn.b1", (cfg.d_f,)),
            (f"{prefix}.ffn.w2", (cfg.d_f, d)), (f"{prefix}.ffn.b2", (d,))]
    out += _norm_shapes(f"{prefix}.norm2", d)
    return out


def param_shapes(cfg):
    """Ordered ``(name, shape)`` list; a pure function of the model config."""
    d = cfg.d_model
    shapes = []
    if cfg.use_stfm:
        c_in = 2 * cfg.m_pool ** 2
        k = cfg.stfm_kernel
        shapes += [("stfm.conv0.kernel", (k, c_in, cfg.stfm_channels)),
                   ("stfm.conv0.bias", (cfg.stfm_channels,)),
                   ("stfm.conv1.kernel", (k, cfg.stfm_channels, d)),
                   ("stfm.conv1.bias", (d,))]
    else:
        shapes += [("inproj.weight", (2, d)), ("inproj.bias", (d,))]
    if cfg.use_accident_encoding:
        h = cfg.accident_width
        shapes += [("accident.w0", (cfg.intervals_per_day + cfg.days_per_week, h)),
                   ("accident.b0", (h,)), ("accident.w1", (h, d)), ("accident.b1", (d,))]
    for layer in range(cfg.num_layers):
        p = f"encoder.{layer}"
        shapes += _attention_shapes(f"{p}.attn", d) + _norm_shapes(f"{p}.attn_norm", d)
        if cfg.use_ft_block:
            shapes += _ft_shapes(f"{p}.ft", cfg)
    shapes += [("decoder.embed.weight", (2, d)), ("decoder.embed.bias", (d,))]
    for layer in range(cfg.num_layers):
        p = f"decoder.{layer}"
        shapes += _attention_shapes(f"{p}.self_attn", d) + _norm_shapes(f"{p}.self_norm", d)
        shapes += _attention_shapes(f"{p}.cross_attn", d) + _norm_shapes(f"{p}.cross_norm", d)
        if cfg.use_ft_block:
            shapes += _ft_shapes(f"{p}.ft", cfg)
    shapes += [("head.weight", (d, 2)), ("head.bias", (2,))]
    return shapes


def count_parameters(cfg):
    return sum(int(np.prod(s)) for _, s in param_shapes(cfg))


def _fans(shape):
    if len(shape) == 3:
        k, din, dout = shape
        return k * din, k * dout
    return shape[0], shape[1]


class ParamStore(OrderedDict):
    """Named learnable tensors."""

    def count(self):
        return sum(p.size for p in self.values())

    def zero_grad(self):
        for p in self.values():
            p.grad = None

    def arrays(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.items())

    @classmethod
    def from_arrays(cls, arrays):
        return cls((k, Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k))
                   for k, v in arrays.items())

    def copy(self):
        return ParamStore.from_arrays(self.arrays())


def init_params(shapes, seed=0):
    """Glorot-uniform weights, zero biases/betas, unit gammas.

    Each parameter draws from its own named stream, so variants that add or
    drop a sub-module initialize every shared parameter identically.
    """
    store = ParamStore()
    for name, shape in shapes:
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf == "beta" or leaf.startswith("b") and len(shape) == 1:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = stream(seed, "init", name).uniform(-limit, limit, shape)
        store[name] = Tensor(data, requires_grad=True, name=name)
    return store


# -- building blocks ----------------------------------------------------------------

class Dropout:
    """Dropout bound to one train/eval mode and one random stream."""

    def __init__(self, rate, rng=None, train=False):
        self.rate = rate
        self.rng = rng
        self.train = bool(train) and rate > 0

    def __call__(self, x):
        return dropout(x, self.rate, self.rng, self.train)


EVAL = Dropout(0.0)


def stfm_forward(patches, params, cfg):
    """Fuse flattened transition patches ``[..., T, 2*m*m]`` into ``[..., T, d_model]``.

    Two same-padded temporal convolutions, each followed by ReLU.
    """
    if not cfg.use_stfm:
        raise ConfigError("stfm_forward called with use_stfm disabled")
    h = relu(conv1d_same(patches, params["stfm.conv0.kernel"], params["stfm.conv0.bias"]))
    return relu(conv1d_same(h, params["stfm.conv1.kernel"], params["stfm.conv1.bias"]))


def accident_onehot(counts, interval_of_day, day_of_week, z, days=7):
    """Two-hot ``[..., z + days]`` vectors carrying the accident count at both positions."""
    counts = np.asarray(counts, dtype=float)
    iod = np.asarray(interval_of_day, dtype=np.int64)
    dow = np.asarray(day_of_week, dtype=np.int64)
    if iod.min(initial=0) < 0 or iod.max(initial=0) >= z:
        raise ContractError(f"interval_of_day must lie in [0, {z})")
    if dow.min(initial=0) < 0 or dow.max(initial=0) >= days:
        raise ContractError(f"day_of_week must lie in [0, {days})")
    out = np.zeros(counts.shape + (z + days,))
    np.put_along_axis(out, iod[..., None], counts[..., None], axis=-1)
    np.put_along_axis(out, (z + dow)[..., None], counts[..., None], axis=-1)
    return out


def accident_encode(counts, interval_of_day, day_of_week, params, cfg):
    c = accident_onehot(counts, interval_of_day, day_of_week, cfg.intervals_per_day,
                        cfg.days_per_week)
    h = relu(linear(c, params["accident.w0"], params["accident.b0"]))
    return relu(linear(h, params["accident.w1"], params["accident.b1"]))


def ft_block(x, params, prefix, cfg, causal, drop=EVAL):
    """Multi-kernel temporal conv branches + residual, norm, feed-forward, norm."""
    conv = conv1d_causal if causal else conv1d_same
    branches = None
    for k in cfg.ft_kernel_sizes:
        b = conv(x, params[f"{prefix}.conv{k}.kernel"], params[f"{prefix}.conv{k}.bias"])
        branches = b if branches is None else branches + b
    h = layer_norm(x + drop(branches), params[f"{prefix}.norm1.gamma"],
                   params[f"{prefix}.norm1.beta"])
    f = relu(linear(h, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    f = linear(f, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])
    return layer_norm(h + drop(f), params[f"{prefix}.norm2.gamma"], params[f"{prefix}.norm2.beta"])


@lru_cache(maxsize=64)
def _mask(tq, tk, window, causal):
    q = np.arange(tq)[:, None]
    k = np.arange(tk)[None, :]
    allowed = np.ones((tq, tk), dtype=bool)
    if window is not None:
        allowed &= np.abs(q - k) <= window
    if causal:
        allowed &= k <= q
    if not allowed.any(axis=1).all():
        raise ContractError("attention mask blocks every key for some query")
    m = np.where(allowed, 0.0, MASK_VALUE)
    m.flags.writeable = False
    return m


def attention_mask(tq, tk, window=None, causal=False):
    """Additive mask: 0 inside the band ``|q - k| <= window`` (and ``k <= q`` if causal)."""
    return _mask(tq, tk, None if window is None else int(window), bool(causal))


def _check_mask(mask):
    if mask is not None and not (np.asarray(mask) > MASK_VALUE / 2).any(axis=-1).all():
        raise ContractError("attention mask row is fully blocked")


def local_attention(q, k, v, mask, wq, wk, wv, return_weights=False):
    """Single-head masked scaled dot-product attention.

    ``softmax((q wq)(k wk)^T / sqrt(d_head) + mask) (v wv)``; ``mask=None`` is
    unmasked (global) attention.
    """
    _check_mask(mask)
    qp, kp, vp = matmul(q, wq), matmul(k, wk), matmul(v, wv)
    kt = kp.transpose(tuple(range(kp.ndim - 2)) + (kp.ndim - 1, kp.ndim - 2))
    scores = matmul(qp, kt) * (1.0 / math.sqrt(qp.shape[-1]))
    if mask is not None:
        scores = scores + mask
    w = softmax_last(scores)
    out = matmul(w, vp)
    return (out, w) if return_weights else out


def _split_heads(x, u):
    *lead, t, d = x.shape
    n = len(lead)
    x = x.reshape(*lead, t, u, d // u)
    return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x):
    *lead, u, t, dh = x.shape
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
    return x.reshape(*lead, t, u * dh)


def multi_head_local_attention(q_in, kv_in, params, prefix, num_heads, mask,
                               return_weights=False):
    """``num_heads`` attention heads over column blocks of the projections, concatenated, then ``wo``."""
    d = q_in.shape[-1]
    if d % num_heads:
        raise ConfigError(f"d_model={d} is not divisible by num_heads={num_heads}")
    _check_mask(mask)
    wq, wk, wv, wo = (params[f"{prefix}.{w}"] for w in ("wq", "wk", "wv", "wo"))
    q = _split_heads(matmul(q_in, wq), num_heads)
    k = _split_heads(matmul(kv_in, wk), num_heads)
    v = _split_heads(matmul(kv_in, wv), num_heads)
    kt = k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = matmul(q, kt) * (1.0 / math.sqrt(d // num_heads))
    if mask is not None:
        scores = scores + mask
    w = softmax_last(scores)
    out = matmul(_merge_heads(matmul(w, v)), wo)
    return (out, w) if return_weights else out


def _self_mask(cfg, t, causal):
    window = cfg.attention_window if cfg.local_attention else None
    if window is None and not causal:
        return None
    return attention_mask(t, t, window, causal)


def encoder_forward(enc_in, params, cfg, drop=EVAL):
    x = enc_in
    mask = _self_mask(cfg, x.shape[-2], causal=False)
    for layer in range(cfg.num_layers):
        p = f"encoder.{layer}"
        a = multi_head_local_attention(x, x, params, f"{p}.attn", cfg.num_heads, mask)
        x = layer_norm(x + drop(a), params[f"{p}.attn_norm.gamma"], params[f"{p}.attn_norm.beta"])
        if cfg.use_ft_block:
            x = ft_block(x, params, f"{p}.ft", cfg, causal=False, drop=drop)
    return x


def decoder_forward(dec_in, memory, params, cfg, drop=EVAL):
    """Per-position next-interval predictions ``[..., T, 2]`` from flows ``[..., T, 2]``."""
    y = linear(dec_in, params["decoder.embed.weight"], params["decoder.embed.bias"])
    mask = _self_mask(cfg, y.shape[-2], causal=True)
    for layer in range(cfg.num_layers):
        p = f"decoder.{layer}"
        a = multi_head_local_attention(y, y, params, f"{p}.self_attn", cfg.num_heads, mask)
        y = layer_norm(y + drop(a), params[f"{p}.self_norm.gamma"], params[f"{p}.self_norm.beta"])
        c = multi_head_local_attention(y, memory, params, f"{p}.cross_attn", cfg.num_heads, None)
        y = layer_norm(y + drop(c), params[f"{p}.cross_norm.gamma"],
                       params[f"{p}.cross_norm.beta"])
        if cfg.use_ft_block:
            y = ft_block(y, params, f"{p}.ft", cfg, causal=cfg.ft_causal_in_decoder, drop=drop)
    return linear(y, params["head.weight"], params["head.bias"])


def encoder_input(ws, params, cfg):
    if cfg.use_stfm:
        x = stfm_forward(ws.patches, params, cfg)
    else:
        x = linear(ws.totals, params["inproj.weight"], params["inproj.bias"])
    if cfg.use_accident_encoding:
        x = x + accident_encode(ws.accidents, ws.iod, ws.dow, params, cfg)
    return x


def stcl_forward(ws, params, cfg, drop=EVAL):
    """Next-interval (in, out) predictions ``[B, 2]`` in scaled units for a window set."""
    memory = encoder_forward(encoder_input(ws, params, cfg), params, cfg, drop)
    out = decoder_forward(ws.dec_in, memory, params, cfg, drop)
    return out[..., -1, :]


def stcl_loss(yhat, y):
    return mse_mean(yhat, y)


def rollout(ws, params, cfg, horizon):
    """Autoregressive multi-step forecast ``[B, horizon, 2]``.

    Encoder memory stays fixed; each step slides the decoder window forward by
    appending the previous prediction in place of the unobserved flow.
    """
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    with no_grad():
        memory = encoder_forward(encoder_input(ws, params, cfg), params, cfg)
        seq = np.asarray(ws.dec_in, dtype=float)
        t = seq.shape[-2]
        preds = []
        for _ in range(horizon):
            step = decoder_forward(seq[..., -t:, :], memory, params, cfg).data[..., -1, :]
            preds.append(step)
            seq = np.concatenate([seq, step[..., None, :]], axis=-2)
    return np.stack(preds, axis=-2)


class STCLModel:
    """Parameters plus config, with the interface the trainer drives."""

    def __init__(self, cfg, params=None, seed=0):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(param_shapes(cfg), seed)
        expected = dict(param_shapes(cfg))
        got = {k: v.shape for k, v in self.params.items()}
        if got != expected:
            raise ContractError("parameter store does not match the model config")

    @property
    def d_model(self):
        return self.cfg.d_model

    def loss(self, ws, rng=None):
        drop = Dropout(self.cfg.dropout, rng, train=rng is not None)
        return stcl_loss(stcl_forward(ws, self.params, self.cfg, drop), ws.target)

    def predict(self, ws, batch_size=2048):
        out = np.zeros((len(ws), 2))
        with no_grad():
            for lo in range(0, len(ws), batch_size):
                part = ws.subset(slice(lo, lo + batch_size))
                out[lo:lo + batch_size] = stcl_forward(part, self.params, self.cfg).data
        return out
