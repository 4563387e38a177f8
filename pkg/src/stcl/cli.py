"""``stcl`` command line: synth, ingest, train, eval, ablate, predict.

Every command that writes an output directory also writes the fully resolved
run configuration to ``config.txt`` inside it.
"""
import argparse
import json
import logging
import os
import sys
from collections import OrderedDict
from dataclasses import replace

from stcl.config import RunConfig, diff_keys, load_config, parse_config_text
from stcl.dataflow import (
    ScalerParams, compute_flow, compute_transitions, infer_num_intervals, ingest_accidents,
    ingest_trips, minmax_invert, prepare_dataset,
)
from stcl.errors import CompatibilityError, InputError, STCLError
from stcl.model import ParamStore, STCLModel
from stcl.persist import load_checkpoint, load_cube, save_checkpoint, save_cube
from stcl.synthgen import generate
from stcl.trainer import (
    SUITES, HistoricalAverage, MLPBaseline, OraclePredictor, baseline_mlp, evaluate_on, fit_stcl,
    run_ablation, write_metrics_csv, write_trace_csv,
)


log = logging.getLogger("stcl")


FLOW_FILE = "flow.stcb"
TRANSITIONS_FILE = "transitions.stcb"
ACCIDENTS_FILE = "accidents.stcb"
CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.stcl"
COMPAT_PREFIXES = ("grid.", "data.", "model.")


# -- helpers ----------------------------------------------------------------------

def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise InputError(f"output directory {path} is not writable")
    return path


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from None


def _echo_config(out, cfg):
    _write_text(os.path.join(out, CONFIG_FILE), cfg.to_text())


def _resolve(cfg):
    """Derive dependent keys: the accident encoding width follows the grid's interval length."""
    cfg.model = replace(cfg.model, intervals_per_day=cfg.grid.intervals_per_day)
    return cfg.validate()


def _config(path, base=None):
    if path:
        return load_config(path, base)
    return (base.copy() if base is not None else RunConfig()).validate()


def _load_data(data_dir, cfg):
    """Read the three cubes and reconcile their shape with ``cfg.grid``."""
    flow = load_cube(os.path.join(data_dir, FLOW_FILE))
    trans = load_cube(os.path.join(data_dir, TRANSITIONS_FILE))
    acc = load_cube(os.path.join(data_dir, ACCIDENTS_FILE))
    if flow.ndim != 4 or trans.ndim != 6 or acc.ndim != 4:
        raise InputError(f"{data_dir}: cube ranks {flow.ndim}/{trans.ndim}/{acc.ndim}, expected 4/6/4")
    x, y, T = flow.shape[:3]
    if cfg.grid.num_intervals == 0:
        cfg.grid = replace(cfg.grid, num_intervals=T)
    for key, have in (("grid.x_cells", x), ("grid.y_cells", y), ("grid.num_intervals", T)):
        want = getattr(cfg.grid, key.split(".")[1])
        if want != have:
            raise CompatibilityError(f"{key}={want} in the config but the data has {have}")
    if trans.shape != (x, y, x, y, T, 2) or acc.shape != (x, y, T, 1):
        raise InputError(f"{data_dir}: cube shapes disagree with the flow cube {flow.shape}")
    return flow, trans, acc


def _data_config(data_dir, path):
    base = None
    cfg_path = os.path.join(data_dir, CONFIG_FILE)
    if os.path.exists(cfg_path):
        base = load_config(cfg_path)
    return _resolve(_config(path, base))


def _dataset(cfg, cubes, scalers=None):
    return prepare_dataset(*cubes, cfg.grid, cfg.data, cfg.model, scalers)


def _checkpoint_arrays(predictor, dataset):
    arrays = OrderedDict()
    if hasattr(predictor, "params"):
        arrays.update(predictor.params.arrays())
    arrays["scaler.flow.min"] = dataset.flow_scaler.min
    arrays["scaler.flow.max"] = dataset.flow_scaler.max
    arrays["scaler.transition.min"] = dataset.transition_scaler.min
    arrays["scaler.transition.max"] = dataset.transition_scaler.max
    return arrays


def build_predictor(cfg, arrays):
    params = ParamStore.from_arrays({k: v for k, v in arrays.items() if not k.startswith("scaler.")})
    kind = cfg.model.kind
    if kind == "oracle":
        return OraclePredictor()
    if kind == "mlp":
        return MLPBaseline(cfg.model.t_hist, cfg.model.mlp_hidden, params=params)
    return STCLModel(cfg.model, params=params)


def _open_checkpoint(path, override=None):
    text, arrays = load_checkpoint(path)
    cfg = parse_config_text(text).validate()
    if override:
        requested = _resolve(load_config(override, cfg))
        diff = diff_keys(cfg, requested, COMPAT_PREFIXES)
        if diff:
            left, right = dict(cfg.items()), dict(requested.items())
            detail = ", ".join(f"{k} (checkpoint {left[k]!r}, config {right[k]!r})" for k in diff)
            raise CompatibilityError(f"config does not match the checkpoint: {detail}")
        cfg = requested
    try:
        predictor = build_predictor(cfg, arrays)
        scalers = (ScalerParams(arrays["scaler.flow.min"], arrays["scaler.flow.max"]),
                   ScalerParams(arrays["scaler.transition.min"], arrays["scaler.transition.max"]))
    except (KeyError, STCLError) as exc:
        raise CompatibilityError(f"{path}: parameters do not match its config ({exc})") from None
    return cfg, predictor, scalers


def _print_reports(reports):
    print("variant,channel,rmse,mae,regions")
    for name, rep in reports.items():
        for row in rep.rows(name):
            print("%s,%s,%.6g,%.6g,%d" % row)


# -- commands -----------------------------------------------------------------------

def cmd_synth(args):
    cfg = _resolve(_config(args.config))
    out = _out_dir(args.out_dir)
    result = generate(cfg.synth, cfg.grid)
    cfg.grid = result.grid
    result.write(os.path.join(out, "trips.csv"), os.path.join(out, "accidents.csv"))
    save_cube(os.path.join(out, "truth.stcb"), result.intensity)
    _echo_config(out, cfg)
    print(f"wrote {result.num_trips} trips and {len(result.accidents['time'])} accidents to {out}")
    return 0


def cmd_ingest(args):
    cfg = _config(args.config)
    if cfg.grid.num_intervals == 0:
        cfg.grid = replace(cfg.grid, num_intervals=infer_num_intervals(args.trips, cfg.grid))
    cfg = _resolve(cfg)
    out = _out_dir(args.out)
    trips = ingest_trips(args.trips, cfg.grid)
    accidents = ingest_accidents(args.accidents, cfg.grid)
    flow = compute_flow(trips, cfg.grid)
    trans = compute_transitions(trips, cfg.grid, cfg.data.m_span)
    save_cube(os.path.join(out, FLOW_FILE), flow.values)
    save_cube(os.path.join(out, TRANSITIONS_FILE), trans.values)
    save_cube(os.path.join(out, ACCIDENTS_FILE), accidents.values)
    report = {
        "trips": trips.report.as_dict(),
        "accidents": accidents.report.as_dict(),
        "counted_trips": int(flow.values[..., 0].sum()),
        "transitions_skipped": trans.skipped,
    }
    _write_text(os.path.join(out, "ingest_report.json"), json.dumps(report, indent=2) + "\n")
    _echo_config(out, cfg)
    print(json.dumps(report))
    return 0


def cmd_train(args):
    cfg = _data_config(args.data, args.config)
    cubes = _load_data(args.data, cfg)
    out = _out_dir(args.out)
    dataset = _dataset(cfg, cubes)
    trace = []
    if cfg.model.kind == "stcl":
        predictor, result = fit_stcl(dataset, cfg.model, cfg.train)
        trace = result.trace
    elif cfg.model.kind == "mlp":
        predictor, result = baseline_mlp(dataset.train, cfg.train, dataset.val, cfg.model.mlp_hidden)
        trace = result.trace
    else:
        predictor = OraclePredictor()
    save_checkpoint(os.path.join(out, CHECKPOINT_FILE), cfg.to_text(),
                    _checkpoint_arrays(predictor, dataset))
    write_trace_csv(os.path.join(out, "loss_trace.csv"), trace)
    reports = OrderedDict()
    reports[cfg.model.kind] = evaluate_on(dataset, predictor, cfg.train)
    reports["ha"] = evaluate_on(dataset, HistoricalAverage.for_dataset(dataset), cfg.train)
    write_metrics_csv(os.path.join(out, "metrics.csv"), reports)
    _echo_config(out, cfg)
    _print_reports(reports)
    return 0


def cmd_eval(args):
    cfg, predictor, scalers = _open_checkpoint(args.checkpoint, args.config)
    dataset = _dataset(cfg, _load_data(args.data, cfg), scalers)
    reports = {cfg.model.kind: evaluate_on(dataset, predictor, cfg.train)}
    if args.out:
        write_metrics_csv(args.out, reports)
    _print_reports(reports)
    return 0


def cmd_ablate(args):
    cfg = _data_config(args.data, args.config)
    cubes = _load_data(args.data, cfg)
    out = _out_dir(args.out)
    reports = run_ablation(args.suite, _dataset(cfg, cubes), cfg.model, cfg.train)
    write_metrics_csv(os.path.join(out, "metrics.csv"), reports)
    _echo_config(out, cfg)
    _print_reports(reports)
    return 0


def cmd_predict(args):
    cfg, predictor, scalers = _open_checkpoint(args.checkpoint, args.config)
    dataset = _dataset(cfg, _load_data(args.data, cfg), scalers)
    if not 0 <= args.region < cfg.grid.regions:
        raise InputError(f"--region {args.region} out of range [0, {cfg.grid.regions})")
    ws = dataset.test.subset(dataset.test.region == args.region)
    pred = minmax_invert(dataset.flow_scaler, predictor.predict(ws))
    cx, cy = divmod(args.region, cfg.grid.y_cells)
    truth = dataset.flow_raw[cx, cy, ws.target_interval]
    lines = ["interval,true_in,true_out,pred_in,pred_out"]
    for t, row_true, row_pred in zip(ws.target_interval, truth, pred):
        values = ",".join(repr(float(v)) for v in (*row_true, *row_pred))
        lines.append(f"{t},{values}")
    _write_text(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(ws)} rows to {args.out}")
    return 0


# -- entry point ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="stcl", description="Region traffic-flow forecasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="build flow/transition/accident cubes from CSV records")
    p.add_argument("--trips", required=True)
    p.add_argument("--accidents", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model on an ingested data directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test range")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", help="optional metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a flag-on/flag-off pair")
    p.add_argument("--suite", required=True, choices=sorted(SUITES))
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="per-interval truth vs prediction for one region")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--region", required=True, type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except STCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
