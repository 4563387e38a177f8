"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line."""
import time
from dataclasses import replace

import numpy as np
import pytest

from _helpers import random_windows
from test_dataflow import GRID as ETL_GRID, brute_force, random_trips
from test_model import causality_violations
from test_tensorcore import GRAD_TOL, OP_CASES, rand, weighted
from stcl.config import DataConfig, GridSpec, ModelConfig, RunConfig, SynthConfig, TrainConfig
from stcl.dataflow import (
    ScalerParams, compute_flow, compute_transitions, minmax_apply, minmax_fit, minmax_invert,
    prepare_dataset,
)
from stcl.errors import InputError
from stcl.model import (
    ParamStore, STCLModel, attention_mask, init_params, local_attention, param_shapes,
    stcl_forward, stcl_loss,
)
from stcl.persist import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from stcl.rng import stream
from stcl.synthgen import generate
from stcl.tensorcore import AdamState, Tensor, adam_step, conv1d_same, grad_check, no_grad, noam_lr
from stcl.trainer import HistoricalAverage, evaluate, evaluate_on, fit_stcl, run_ablation

pytestmark = pytest.mark.slow

TINY = ModelConfig.tiny()
EXPERIMENT_TRAIN = TrainConfig(max_epochs=20, warmup=400, batch_size=64, seed=0)


@pytest.fixture
def verdict(capsys):
    def report(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return report


def test_01_gradients(verdict):
    start = time.perf_counter()
    op_errors = {}
    for name, (fn, shapes) in OP_CASES.items():
        inputs = [rand(s, i + 11) for i, s in enumerate(shapes)]
        f = (lambda: fn(*inputs)) if name == "mse" else (lambda: weighted(fn(*inputs)))
        op_errors[name] = grad_check(f, inputs, h=1e-5)
    ws = random_windows(TINY, x=3, y=3, count=2)
    params = init_params(param_shapes(TINY), 1)
    for name, t in params.items():
        if t.data.ndim == 1:
            t.data = t.data + stream(1, "shift", name).uniform(-0.3, 0.3, t.shape)
    model_err = grad_check(lambda: stcl_loss(stcl_forward(ws, params, TINY), ws.target),
                           list(params.values()), h=1e-5)
    elapsed = time.perf_counter() - start
    worst_op = max(op_errors, key=op_errors.get)
    ok = op_errors[worst_op] < GRAD_TOL and model_err < 1e-4 and elapsed < 120
    verdict(1, "gradient suite", ok,
            f"worst op {worst_op}={op_errors[worst_op]:.2e} (<1e-6), tiny model={model_err:.2e} "
            f"(<1e-4), {elapsed:.1f}s (<120s)")


def test_02_causality(verdict):
    causal = causality_violations(TINY, trials=100)
    contrast = causality_violations(replace(TINY, ft_causal_in_decoder=False), trials=100)
    verdict(2, "causality suite", causal == 0 and contrast >= 1,
            f"{causal}/100 violations with causal FT-block, {contrast}/100 without")


def test_03_locality(verdict):
    worst_mass, bitwise = 0.0, True
    for seed in range(20):
        rng = stream(seed, "locality")
        t = int(rng.integers(4, 24))
        w = int(rng.integers(0, 4))
        x = rng.normal(size=(3, t, 8)) * 4
        wq, wk, wv = (rng.normal(size=(8, 8)) for _ in range(3))
        _, weights = local_attention(x, x, x, attention_mask(t, t, w), wq, wk, wv, True)
        q, k = np.indices((t, t))
        worst_mass = max(worst_mass, float(weights.data[..., np.abs(q - k) > w].max(initial=0.0)))
        full = local_attention(x, x, x, attention_mask(t, t, t - 1), wq, wk, wv).data
        bitwise &= np.array_equal(full, local_attention(x, x, x, None, wq, wk, wv).data)
    verdict(3, "locality suite", worst_mass < 1e-30 and bitwise,
            f"max weight outside band {worst_mass:.1e} (<1e-30), full band == global bitwise: {bitwise}")


def test_04_etl_oracle(verdict):
    mismatches, conserved, skips = 0, True, 0
    for seed in range(50):
        table = random_trips(seed, 100, ETL_GRID)
        flow, trans, skipped = brute_force(table, ETL_GRID, m_span=2)
        fc = compute_flow(table, ETL_GRID).values
        tc = compute_transitions(table, ETL_GRID, m_span=2)
        mismatches += not (np.array_equal(fc, flow) and np.array_equal(tc.values, trans)
                           and tc.skipped == skipped)
        conserved &= fc[..., 0].sum() == fc[..., 1].sum()
        skips += skipped
    verdict(4, "ETL oracle suite", mismatches == 0 and conserved and skips > 0,
            f"{mismatches}/50 instances differ from brute force, conservation exact: {conserved}, "
            f"{skips} span-threshold discards cross-checked")


def test_05_scaling(verdict):
    worst = 0.0
    for seed in range(100):
        rng = stream(seed, "scale")
        values = rng.uniform(-10, 10, (50, 2)) * rng.uniform(0.1, 100)
        sc = minmax_fit(values[:30])
        worst = max(worst, float(np.abs(minmax_invert(sc, minmax_apply(sc, values)) - values).max()))
    ws = random_windows(TINY, count=4).with_target(np.zeros((4, 2)))

    class Fixed:
        def predict(self, windows):
            return np.full((len(windows), 2), 0.25)

    narrow = evaluate(Fixed(), ws, ScalerParams(np.zeros(2), np.full(2, 4.0)))
    wide = evaluate(Fixed(), ws, ScalerParams(np.zeros(2), np.full(2, 40.0)))
    raw_units = np.isclose(narrow.rmse_in, 1.0) and np.isclose(wide.rmse_in, 10.0)
    verdict(5, "scaling suite", worst <= 1e-12 and raw_units,
            f"max |invert(apply(x)) - x| = {worst:.1e} (<=1e-12), RMSE for fixed scaled residual "
            f"0.25 under ranges 4 / 40: {narrow.rmse_in:.3g} / {wide.rmse_in:.3g}")


def experiment_dataset(synth):
    out = generate(synth, GridSpec(x_cells=4, y_cells=4, interval_minutes=15))
    cfg = replace(TINY, intervals_per_day=out.grid.intervals_per_day)
    return prepare_dataset(*out.cubes(4), out.grid, DataConfig(), cfg), cfg


def test_06_learning_effect(verdict):
    start = time.perf_counter()
    data, cfg = experiment_dataset(SynthConfig(days=14, accident_rate=0.003, seed=0))
    model, _ = fit_stcl(data, cfg, EXPERIMENT_TRAIN)
    stcl = evaluate_on(data, model, EXPERIMENT_TRAIN)
    ha = evaluate_on(data, HistoricalAverage.for_dataset(data), EXPERIMENT_TRAIN)
    elapsed = time.perf_counter() - start
    r_in, r_out = stcl.rmse_in / ha.rmse_in, stcl.rmse_out / ha.rmse_out
    ok = r_in <= 0.7 and r_out <= 0.7 and elapsed < 600
    verdict(6, "learning effect", ok,
            f"STCL/HA RMSE inflow {stcl.rmse_in:.3f}/{ha.rmse_in:.3f}={r_in:.3f}, outflow "
            f"{stcl.rmse_out:.3f}/{ha.rmse_out:.3f}={r_out:.3f} (<=0.7), {elapsed:.0f}s (<600s)")


def test_07_accident_encoding(verdict):
    start = time.perf_counter()
    heavy, cfg = experiment_dataset(SynthConfig(days=14, accident_rate=0.01, accident_lag=1, seed=0))
    on, off = run_ablation("accident_encoding", heavy, cfg, EXPERIMENT_TRAIN).values()
    lower = on.rmse_in < off.rmse_in and on.rmse_out < off.rmse_out
    free, cfg = experiment_dataset(SynthConfig(days=14, accident_rate=0.0, seed=0))
    free_on, free_off = run_ablation("accident_encoding", free, cfg, EXPERIMENT_TRAIN).values()
    rel = max(abs(free_on.rmse_in - free_off.rmse_in) / free_off.rmse_in,
              abs(free_on.rmse_out - free_off.rmse_out) / free_off.rmse_out)
    elapsed = time.perf_counter() - start
    verdict(7, "accident-encoding effect", lower and rel < 0.05,
            f"heavy: on/off inflow {on.rmse_in:.4f}/{off.rmse_in:.4f}, outflow "
            f"{on.rmse_out:.4f}/{off.rmse_out:.4f}; accident-free max rel diff {rel:.2%} (<5%), "
            f"{elapsed:.0f}s")


def test_08_noam_adam(verdict):
    lr = noam_lr(4000, 64, 4000)
    trace = [noam_lr(s, 64, 4000) for s in range(1, 8001)]
    peak = int(np.argmax(trace)) + 1
    params = ParamStore(w=Tensor(stream(0, "w").normal(size=(3, 3)), requires_grad=True))
    before = params["w"].data.copy()
    state = AdamState()
    adam_step(params, state, 1e-2, grads={"w": np.zeros((3, 3))})
    adam_step(params, state, 1e-2)  # no gradient attached
    noop = np.array_equal(params["w"].data, before)
    ok = abs(lr - 1.9764e-3) <= 1e-7 and peak == 4000 and noop
    verdict(8, "Noam/Adam checks", ok,
            f"noam_lr(4000, 64, 4000)={lr:.7e}, peak at step {peak}, zero-grad step no-op: {noop}")


def test_09_persistence(verdict, tmp_path):
    model = STCLModel(TINY, seed=7)
    ws = random_windows(TINY, count=8)
    text = RunConfig(model=TINY).to_text()
    save_checkpoint(tmp_path / "m.stcl", text, model.params.arrays())
    _, arrays = load_checkpoint(tmp_path / "m.stcl")
    again = STCLModel(TINY, params=ParamStore.from_arrays(arrays))
    with no_grad():
        identical = np.array_equal(stcl_forward(ws, model.params, TINY).data,
                                   stcl_forward(ws, again.params, TINY).data)
    raw = bytearray(checkpoint_bytes(text, model.params.arrays()))
    rng = stream(9, "flip")
    detected = 0
    for pos, bit in zip(rng.integers(0, len(raw), 1000), rng.integers(0, 8, 1000)):
        raw[pos] ^= 1 << bit
        try:
            parse_checkpoint(bytes(raw))
        except InputError:
            detected += 1
        raw[pos] ^= 1 << bit
    verdict(9, "persistence", identical and detected == 1000,
            f"reload forward bit-identical: {identical}, corrupted checkpoints refused {detected}/1000")


def _best_time(fn, repeats=9):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def test_10_complexity(verdict):
    lengths = [32, 64, 128, 256]
    attn, conv = [], []
    with no_grad():
        for t in lengths:
            rng = stream(t, "complexity")
            x = rng.normal(size=(96, t, 8))
            w = [rng.normal(size=(8, 8)) for _ in range(3)]
            mask = attention_mask(t, t, 3)
            attn.append(_best_time(lambda: local_attention(x, x, x, mask, *w)))
            xc = rng.normal(size=(32, t, 16))
            kernel, bias = rng.normal(size=(5, 16, 16)), np.zeros(16)
            conv.append(_best_time(lambda: conv1d_same(xc, kernel, bias)))
    logs = np.log(lengths)
    a_exp = float(np.polyfit(logs, np.log(attn), 1)[0])
    c_exp = float(np.polyfit(logs, np.log(conv), 1)[0])
    ok = abs(a_exp - 2.0) <= 0.4 and abs(c_exp - 1.0) <= 0.3
    verdict(10, "complexity sanity", ok,
            f"attention exponent {a_exp:.2f} (2.0+-0.4), conv exponent {c_exp:.2f} (1.0+-0.3)")
