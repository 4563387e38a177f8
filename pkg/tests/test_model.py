import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import random_windows
from stcl.config import ModelConfig
from stcl.errors import ConfigError, ContractError
from stcl.model import (
    STCLModel, accident_encode, accident_onehot, attention_mask, count_parameters,
    decoder_forward, encoder_forward, ft_block, init_params, local_attention,
    multi_head_local_attention, param_shapes, rollout, stcl_forward, stcl_loss, stfm_forward,
)
from stcl.rng import stream
from stcl.tensorcore import Tensor, grad_check

DEFAULT = ModelConfig().validate()
TINY = ModelConfig.tiny()


def params_for(cfg, seed=0):
    return init_params(param_shapes(cfg), seed)


def np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# parameter counts ------------------------------------------------------------------

def expected_count(cfg):
    d, f = cfg.d_model, cfg.d_f
    attn = 4 * d * d + 2 * d
    ft = sum(k * d * d + d for k in cfg.ft_kernel_sizes) + 2 * d + (d * f + f + f * d + d) + 2 * d
    ft = ft if cfg.use_ft_block else 0
    c = 2 * cfg.m_pool ** 2
    front = (cfg.stfm_kernel * c * cfg.stfm_channels + cfg.stfm_channels
             + cfg.stfm_kernel * cfg.stfm_channels * d + d) if cfg.use_stfm else 3 * d
    h = cfg.accident_width
    acc = ((cfg.intervals_per_day + 7) * h + h + h * d + d) if cfg.use_accident_encoding else 0
    return (front + acc + cfg.num_layers * (attn + ft) + 3 * d
            + cfg.num_layers * (2 * attn + ft) + 2 * d + 2)


def test_golden_parameter_counts():
    assert count_parameters(DEFAULT) == 703426
    assert count_parameters(TINY) == 5546
    assert params_for(TINY).count() == 5546


@pytest.mark.parametrize("flag", ["use_stfm", "use_accident_encoding", "use_ft_block"])
def test_param_count_formula(flag):
    for cfg in (DEFAULT, TINY, replace(TINY, **{flag: False}), replace(DEFAULT, **{flag: False})):
        assert count_parameters(cfg) == expected_count(cfg)


def test_shared_params_initialize_identically():
    a = params_for(TINY)
    b = params_for(replace(TINY, use_stfm=False, use_accident_encoding=False))
    for name in b:
        if name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)


def test_config_errors():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(d_model=10, num_heads=4).validate()
    with pytest.raises(ConfigError, match="m_pool"):
        ModelConfig(m_pool=4).validate()


# STFM -------------------------------------------------------------------------------

def test_stfm_shapes():
    patches = stream(0, "p").random((12, 50))
    out = stfm_forward(patches, params_for(DEFAULT), DEFAULT)
    assert out.shape == (12, 64)


def test_stfm_zero_kernels_emit_relu_bias():
    p = params_for(TINY)
    for name in ("stfm.conv0.kernel", "stfm.conv1.kernel"):
        p[name].data[:] = 0
    bias = stream(1, "b").normal(size=8)
    p["stfm.conv1.bias"].data[:] = bias
    out = stfm_forward(stream(2, "x").random((4, 6, 18)), p, TINY).data
    np.testing.assert_array_equal(out, np.broadcast_to(np.maximum(bias, 0), out.shape))


def test_stfm_disabled_raises():
    with pytest.raises(ConfigError):
        stfm_forward(np.zeros((6, 18)), params_for(TINY), replace(TINY, use_stfm=False))


# accident encoding ------------------------------------------------------------------

def test_accident_two_hot():
    c = accident_onehot([3.0], [10], [2], z=96)
    assert c.shape == (1, 103)
    assert np.count_nonzero(c) == 2
    assert c[0, 10] == 3 and c[0, 96 + 2] == 3
    with pytest.raises(ContractError):
        accident_onehot([1.0], [96], [0], z=96)
    with pytest.raises(ContractError):
        accident_onehot([1.0], [0], [7], z=96)


def test_accident_encoding_zero_without_accidents():
    p = params_for(DEFAULT)
    ae = accident_encode(np.zeros(12), np.arange(12), np.full(12, 3), p, DEFAULT)
    assert ae.shape == (12, 64)
    assert not ae.data.any()


# FT-block ---------------------------------------------------------------------------

def test_ft_block_shape_and_residual_path():
    p = params_for(DEFAULT)
    x = stream(0, "x").normal(size=(12, 64))
    assert ft_block(x, p, "encoder.0.ft", DEFAULT, causal=False).shape == (12, 64)
    for name in list(p):
        if name.startswith("encoder.0.ft.") and ("conv" in name or "ffn" in name):
            p[name].data[:] = 0
    out = ft_block(x, p, "encoder.0.ft", DEFAULT, causal=False).data
    np.testing.assert_allclose(out, np_layer_norm(np_layer_norm(x)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 11), st.integers(0, 1000))
def test_ft_block_causal(t, seed):
    p = params_for(TINY, seed)
    x = stream(seed, "x").normal(size=(12, 8))
    bumped = x.copy()
    bumped[t] += stream(seed, "d").normal(size=8)
    a = ft_block(x, p, "decoder.0.ft", TINY, causal=True).data
    b = ft_block(bumped, p, "decoder.0.ft", TINY, causal=True).data
    np.testing.assert_array_equal(a[:t], b[:t])


# attention ---------------------------------------------------------------------------

def proj(seed, d=8, dh=8):
    rng = stream(seed, "proj")
    return [rng.normal(size=(d, dh)) / math.sqrt(d) for _ in range(3)]


def test_zero_window_returns_own_value_row():
    x = stream(0, "x").normal(size=(6, 8))
    wq, wk, wv = proj(0)
    out = local_attention(x, x, x, attention_mask(6, 6, 0), wq, wk, wv).data
    np.testing.assert_allclose(out, x @ wv, rtol=0, atol=1e-14)


def test_full_band_equals_global_bitwise():
    x = stream(1, "x").normal(size=(2, 7, 8))
    wq, wk, wv = proj(1)
    local = local_attention(x, x, x, attention_mask(7, 7, 6), wq, wk, wv).data
    full = local_attention(x, x, x, None, wq, wk, wv).data
    assert np.array_equal(local, full)
    p = params_for(TINY)
    mh_local = multi_head_local_attention(x, x, p, "encoder.0.attn", 2, attention_mask(7, 7, 10)).data
    mh_full = multi_head_local_attention(x, x, p, "encoder.0.attn", 2, None).data
    assert np.array_equal(mh_local, mh_full)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 16), st.integers(0, 5), st.booleans(), st.integers(0, 1000))
def test_attention_weights_local_and_normalized(t, w, causal, seed):
    x = stream(seed, "x").normal(size=(t, 8)) * 5
    wq, wk, wv = proj(seed)
    _, weights = local_attention(x, x, x, attention_mask(t, t, w, causal), wq, wk, wv,
                                 return_weights=True)
    weights = weights.data
    q, k = np.indices((t, t))
    outside = np.abs(q - k) > w
    if causal:
        outside |= k > q
    assert np.all(weights[outside] < 1e-30)
    np.testing.assert_allclose(weights.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_fully_blocked_mask_raises():
    x = np.ones((3, 8))
    wq, wk, wv = proj(0)
    with pytest.raises(ContractError):
        local_attention(x, x, x, np.full((3, 3), -1e9), wq, wk, wv)


def test_multi_head_matches_per_head_concat():
    cfg = TINY
    p = params_for(cfg, 3)
    q_in = stream(0, "q").normal(size=(2, 6, 8))
    kv = stream(0, "kv").normal(size=(2, 5, 8))
    mask = attention_mask(6, 5, 2)
    out = multi_head_local_attention(q_in, kv, p, "decoder.0.cross_attn", 2, mask).data
    wq, wk, wv, wo = (p[f"decoder.0.cross_attn.{w}"].data for w in ("wq", "wk", "wv", "wo"))
    heads = [local_attention(q_in, kv, kv, mask, wq[:, s], wk[:, s], wv[:, s]).data
             for s in (slice(0, 4), slice(4, 8))]
    np.testing.assert_allclose(out, np.concatenate(heads, -1) @ wo, rtol=0, atol=1e-12)


def test_single_head_is_attention_then_output_projection():
    p = params_for(replace(TINY, num_heads=1))
    x = stream(0, "x").normal(size=(6, 8))
    mask = attention_mask(6, 6, 3)
    out = multi_head_local_attention(x, x, p, "encoder.0.attn", 1, mask).data
    w = [p[f"encoder.0.attn.{k}"].data for k in ("wq", "wk", "wv", "wo")]
    single = local_attention(x, x, x, mask, *w[:3]).data
    np.testing.assert_allclose(out, single @ w[3], rtol=0, atol=1e-12)


def test_head_permutation_invariance():
    cfg = replace(DEFAULT, num_heads=4)
    p = params_for(cfg)
    x = stream(0, "x").normal(size=(12, 64))
    mask = attention_mask(12, 12, 3)
    out = multi_head_local_attention(x, x, p, "encoder.0.attn", 4, mask).data
    assert out.shape == (12, 64)
    perm = [2, 0, 3, 1]
    cols = np.concatenate([np.arange(h * 16, (h + 1) * 16) for h in perm])
    q = params_for(cfg)
    for w in ("wq", "wk", "wv"):
        q[f"encoder.0.attn.{w}"].data = p[f"encoder.0.attn.{w}"].data[:, cols]
    q["encoder.0.attn.wo"].data = p["encoder.0.attn.wo"].data[cols]
    permuted = multi_head_local_attention(x, x, q, "encoder.0.attn", 4, mask).data
    np.testing.assert_allclose(out, permuted, rtol=0, atol=1e-12)


def test_multi_head_divisibility():
    with pytest.raises(ConfigError):
        multi_head_local_attention(np.ones((3, 8)), np.ones((3, 8)), params_for(TINY),
                                   "encoder.0.attn", 3, None)


# encoder / decoder ---------------------------------------------------------------------

def test_encoder_zero_layers_is_identity():
    cfg = replace(TINY, num_layers=0)
    x = stream(0, "x").normal(size=(6, 8))
    assert np.array_equal(encoder_forward(Tensor(x), params_for(cfg), cfg).data, x)


def test_encoder_deterministic_and_shape():
    p = params_for(DEFAULT)
    x = stream(0, "x").normal(size=(12, 64))
    a, b = encoder_forward(x, p, DEFAULT).data, encoder_forward(x, p, DEFAULT).data
    assert a.shape == (12, 64) and np.array_equal(a, b)


def causality_violations(cfg, trials=100):
    p = params_for(cfg, 5)
    rng = stream(5, "causality")
    violations = 0
    for _ in range(trials):
        dec = rng.random((cfg.t_hist, 2))
        memory = rng.normal(size=(cfg.t_hist, cfg.d_model))
        t = int(rng.integers(0, cfg.t_hist))
        bumped = dec.copy()
        bumped[t:] = rng.random((cfg.t_hist - t, 2))
        a = decoder_forward(dec, memory, p, cfg).data
        b = decoder_forward(bumped, memory, p, cfg).data
        assert a.shape == (cfg.t_hist, 2)
        violations += not np.array_equal(a[:t], b[:t])
    return violations


def test_decoder_future_blind():
    assert causality_violations(TINY) == 0
    assert causality_violations(replace(TINY, local_attention=False)) == 0


def test_non_causal_ft_block_leaks_future():
    assert causality_violations(replace(TINY, ft_causal_in_decoder=False)) >= 1


# full model --------------------------------------------------------------------------

def test_forward_shape_and_determinism():
    ws = random_windows(TINY, count=5)
    p = params_for(TINY)
    a, b = stcl_forward(ws, p, TINY).data, stcl_forward(ws, p, TINY).data
    assert a.shape == (5, 2) and np.array_equal(a, b)


def test_accident_flag_off_matches_on_for_accident_free_data():
    ws = random_windows(TINY, accidents=False)
    on = stcl_forward(ws, params_for(TINY), TINY).data
    off_cfg = replace(TINY, use_accident_encoding=False)
    off = stcl_forward(ws, params_for(off_cfg), off_cfg).data
    assert np.array_equal(on, off)


@pytest.mark.parametrize("flag", ["use_stfm", "use_accident_encoding", "use_ft_block",
                                  "ft_causal_in_decoder", "local_attention"])
def test_flags_are_live(flag):
    ws = random_windows(TINY, count=6)
    on = stcl_forward(ws, params_for(TINY), TINY).data
    cfg = replace(TINY, **{flag: False})
    off = stcl_forward(ws, params_for(cfg), cfg).data
    assert not np.array_equal(on, off)


def test_forward_finite_with_unit_variance_params():
    ws = random_windows(DEFAULT, x=5, y=5, T=14, count=4)
    p = params_for(DEFAULT)
    for name, t in p.items():
        t.data = stream(0, "unit", name).normal(size=t.shape)
    assert np.isfinite(stcl_forward(ws, p, DEFAULT).data).all()


def test_loss_examples():
    y = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    assert stcl_loss(y, y).item() == 0.0
    assert stcl_loss(y + 0.5, y).item() == 0.25
    yhat = np.array([[1.0, 1.0], [3.0, 5.0], [7.0, 6.0]])
    assert stcl_loss(yhat, y).item() == pytest.approx((0 + 1 + 0 + 1 + 4 + 0) / 6, abs=1e-15)


def test_end_to_end_gradient():
    ws = random_windows(TINY, count=2)
    p = params_for(TINY, 1)
    # move biases off zero so no ReLU sits exactly on its kink
    for name, t in p.items():
        if t.data.ndim == 1:
            t.data = t.data + stream(1, "shift", name).uniform(-0.3, 0.3, t.shape)
    err = grad_check(lambda: stcl_loss(stcl_forward(ws, p, TINY), ws.target), list(p.values()))
    assert err < 1e-4


def test_rollout():
    ws = random_windows(TINY, count=4)
    p = params_for(TINY)
    one = rollout(ws, p, TINY, 1)
    assert np.array_equal(one[:, 0], stcl_forward(ws, p, TINY).data)
    three = rollout(ws, p, TINY, 3)
    assert three.shape == (4, 3, 2)
    assert np.array_equal(three[:, 0], one[:, 0])
    with pytest.raises(ContractError):
        rollout(ws, p, TINY, 0)


def test_model_wrapper():
    ws = random_windows(TINY, count=10)
    model = STCLModel(TINY)
    np.testing.assert_array_equal(model.predict(ws, batch_size=3),
                                  stcl_forward(ws, model.params, TINY).data)
    train_loss = model.loss(ws, stream(0, "drop")).item()
    eval_loss = model.loss(ws).item()
    assert train_loss != eval_loss
    with pytest.raises(ContractError):
        STCLModel(replace(TINY, d_model=16, num_heads=2), params=model.params)
