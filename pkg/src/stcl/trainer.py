"""Training loop, evaluation metrics, baselines and ablation pairs."""
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from stcl.dataflow import minmax_apply, minmax_invert, time_features
from stcl.errors import ConfigError, ContractError, DataQualityError, NumericalError
from stcl.model import STCLModel, init_params
from stcl.rng import stream
from stcl.tensorcore import (
    AdamState, Tape, adam_step, backward, linear, mse_mean, no_grad, noam_lr, relu,
)

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)  # (step, lr, loss)
    epoch_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def steps(self):
        return len(self.trace)


def _fixed_lr(lr):
    return lambda step: lr


def train(model, windows, cfg, val_windows=None, lr_fn=None):
    """Minibatch Adam over shuffled windows; keeps the best-validation parameters.

    ``lr_fn(step)`` defaults to the warmup schedule on ``model.d_model``. The
    final partial batch of an epoch is trained, not dropped.
    """
    cfg.validate()
    if len(windows) == 0:
        raise ConfigError("no training windows")
    if lr_fn is None:
        lr_fn = lambda step: cfg.lr_scale * noam_lr(step, model.d_model, cfg.warmup)
    state = AdamState()
    result = TrainResult()
    best = (math.inf, None)
    step = 0
    for epoch in range(cfg.max_epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(windows))
        total, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = windows.subset(order[lo:lo + cfg.batch_size])
            step += 1
            lr = lr_fn(step)
            model.params.zero_grad()
            with Tape():
                loss = model.loss(batch, stream(cfg.seed, "dropout", step))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"loss is {value} at epoch {epoch + 1}, step {step}")
                backward(loss)
            adam_step(model.params, state, lr)
            result.trace.append((step, lr, value))
            total += value * len(batch)
            seen += len(batch)
        result.epoch_losses.append(total / seen)
        if val_windows is not None and len(val_windows):
            val = float(np.mean((model.predict(val_windows) - val_windows.target) ** 2))
            result.val_losses.append(val)
            if val < best[0]:
                best = (val, model.params.arrays())
                result.best_epoch = epoch + 1
        log.debug("epoch %d loss %.6g", epoch + 1, result.epoch_losses[-1])
    if best[1] is not None:
        for name, arr in best[1].items():
            model.params[name].data = arr
    else:
        result.best_epoch = cfg.max_epochs
    return result


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    rmse_in: float
    rmse_out: float
    mae_in: float
    mae_out: float
    regions_evaluated: int
    residuals: np.ndarray  # [n, 2] raw-unit residuals of evaluated windows
    region_rmse: np.ndarray  # [regions, 2], NaN for excluded regions

    def rows(self, variant):
        return [(variant, "inflow", self.rmse_in, self.mae_in, self.regions_evaluated),
                (variant, "outflow", self.rmse_out, self.mae_out, self.regions_evaluated)]


def evaluate(predictor, windows, scaler, region_means=None, threshold=0.0):
    """RMSE / MAE in raw flow units over regions whose training mean flow >= ``threshold``.

    ``predictor.predict(windows)`` returns scaled predictions; both predictions
    and targets are passed through ``minmax_invert`` before any metric.
    """
    if len(windows) == 0:
        raise DataQualityError("evaluation set is empty")
    regions = windows.region
    n_regions = int(regions.max()) + 1 if region_means is None else len(region_means)
    if region_means is None:
        keep = np.ones(len(windows), dtype=bool)
        live = np.unique(regions)
    else:
        live = np.nonzero(np.asarray(region_means) >= threshold)[0]
        keep = np.isin(regions, live)
    if not keep.any():
        raise DataQualityError(f"no region reaches the evaluation threshold {threshold}")
    pred = minmax_invert(scaler, predictor.predict(windows.subset(keep)))
    truth = minmax_invert(scaler, windows.target[keep])
    res = pred - truth
    rmse = np.sqrt((res ** 2).mean(axis=0))
    mae = np.abs(res).mean(axis=0)
    region_rmse = np.full((n_regions, 2), np.nan)
    kept_regions = regions[keep]
    for r in np.unique(kept_regions):
        sel = kept_regions == r
        region_rmse[r] = np.sqrt((res[sel] ** 2).mean(axis=0))
    return EvalReport(float(rmse[0]), float(rmse[1]), float(mae[0]), float(mae[1]),
                      int(len(np.unique(kept_regions))), res, region_rmse)


class OraclePredictor:
    """Returns each window's own target: a zero-error reference."""

    def predict(self, windows):
        return np.asarray(windows.target, dtype=float)


# -- baselines ---------------------------------------------------------------------

class HistoricalAverage:
    """Mean of each region's training flow in the same (interval-of-day, weekday) slot.

    Slots never seen in training fall back to the region's overall mean. With a
    ``scaler``, :meth:`predict` returns scaled values so the model can be passed
    to :func:`evaluate` like any other predictor.
    """

    def __init__(self, flow, train_range, grid, scaler=None):
        flow = np.asarray(getattr(flow, "values", flow), dtype=float)
        x, y = flow.shape[:2]
        self.grid = grid
        self.scaler = scaler
        self.z = grid.intervals_per_day
        t = np.arange(train_range.start, train_range.stop)
        iod, dow = time_features(grid.t0, grid.interval_seconds, t)
        slot = dow * self.z + iod
        series = flow[:, :, t].reshape(x * y, len(t), -1)
        sums = np.zeros((x * y, 7 * self.z, series.shape[-1]))
        counts = np.zeros(7 * self.z)
        np.add.at(sums, (slice(None), slot), series)
        np.add.at(counts, slot, 1.0)
        self.region_mean = series.mean(axis=1)
        seen = counts > 0
        self.table = np.where(seen[None, :, None], sums / np.maximum(counts, 1)[None, :, None],
                              self.region_mean[:, None, :])

    def query(self, region, interval):
        iod, dow = time_features(self.grid.t0, self.grid.interval_seconds, [interval])
        return self.table[region, dow[0] * self.z + iod[0]]

    def predict_raw(self, windows):
        iod, dow = time_features(self.grid.t0, self.grid.interval_seconds, windows.target_interval)
        return self.table[windows.region, dow * self.z + iod]

    def predict(self, windows):
        raw = self.predict_raw(windows)
        return raw if self.scaler is None else minmax_apply(self.scaler, raw)

    @classmethod
    def for_dataset(cls, dataset):
        return cls(dataset.flow_raw, dataset.train_range, dataset.grid, dataset.flow_scaler)


def baseline_ha(train_flow, train_range, grid, region, interval):
    return HistoricalAverage(train_flow, train_range, grid).query(region, interval)


class MLPBaseline:
    """Fully connected net on the flattened own-flow history ``[t_hist * 2]``."""

    def __init__(self, t_hist, hidden=(128, 64, 32), seed=0, params=None):
        sizes = [2 * t_hist, *hidden, 2]
        shapes = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes += [(f"mlp.{i}.weight", (a, b)), (f"mlp.{i}.bias", (b,))]
        self.t_hist = t_hist
        self.hidden = tuple(hidden)
        self.layers = len(sizes) - 1
        self.params = params if params is not None else init_params(shapes, seed)
        if {k: v.shape for k, v in self.params.items()} != dict(shapes):
            raise ContractError("parameter store does not match the MLP layout")
        self.d_model = hidden[0] if hidden else 2

    def forward(self, windows):
        h = np.asarray(windows.dec_in).reshape(len(windows.dec_in), -1)
        for i in range(self.layers):
            h = linear(h, self.params[f"mlp.{i}.weight"], self.params[f"mlp.{i}.bias"])
            if i < self.layers - 1:
                h = relu(h)
        return h

    def loss(self, windows, rng=None):
        return mse_mean(self.forward(windows), windows.target)

    def predict(self, windows):
        with no_grad():
            return self.forward(windows).data


def baseline_mlp(train_windows, cfg, val_windows=None, hidden=(128, 64, 32)):
    model = MLPBaseline(train_windows.t_hist, hidden, cfg.seed)
    result = train(model, train_windows, cfg, val_windows, lr_fn=_fixed_lr(cfg.mlp_lr))
    return model, result


# -- ablations -----------------------------------------------------------------

SUITES = {
    "stfm": "use_stfm",
    "ft_block": "use_ft_block",
    "ft_causal": "ft_causal_in_decoder",
    "attention_scope": "local_attention",
    "accident_encoding": "use_accident_encoding",
}


def fit_stcl(dataset, model_cfg, train_cfg):
    model = STCLModel(model_cfg, seed=train_cfg.seed)
    result = train(model, dataset.train, train_cfg, dataset.val)
    return model, result


def evaluate_on(dataset, predictor, train_cfg):
    return evaluate(predictor, dataset.test, dataset.flow_scaler, dataset.region_means,
                    train_cfg.eval_region_threshold)


def run_ablation(suite, dataset, model_cfg, train_cfg):
    """Train the flag-on and flag-off variants on identical data and seeds.

    Returns ``{variant_name: EvalReport}`` with the flag-on variant first.
    """
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {', '.join(SUITES)}")
    flag = SUITES[suite]
    reports = {}
    for value in (True, False):
        cfg = replace(model_cfg, **{flag: value}).validate()
        model, _ = fit_stcl(dataset, cfg, train_cfg)
        reports[f"{flag}={str(value).lower()}"] = evaluate_on(dataset, model, train_cfg)
    return reports


def metrics_rows(reports):
    rows = []
    for name, rep in reports.items():
        rows += rep.rows(name)
    return rows


def write_metrics_csv(path, reports):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("variant,channel,rmse,mae,regions\n")
        for variant, channel, rmse, mae, regions in metrics_rows(reports):
            fh.write(f"{variant},{channel},{float(rmse)!r},{float(mae)!r},{regions}\n")


def write_trace_csv(path, trace):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in trace:
            fh.write(f"{step},{float(lr)!r},{float(loss)!r}\n")
