"""Trip and accident records to grid tensors, scaling, and training windows.

Cube layouts (``x`` and ``y`` are grid cells, ``T`` intervals):

* flow:        ``[x, y, T, 2]``        channel 0 inflow, 1 outflow
* transitions: ``[x, y, x, y, T, 2]``  ``[origin, destination, t, c]``; channel 0 counts
  the arrival at the trip's end interval, channel 1 the departure at its start interval
* accidents:   ``[x, y, T, 1]``
"""
import logging
from io import StringIO
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from stcl.errors import ConfigError, ContractError, DataQualityError, InputError

log = logging.getLogger(__name__)

TRIP_COLUMNS = ("start_time", "end_time", "start_lon", "start_lat", "end_lon", "end_lat")
ACCIDENT_COLUMNS = ("time", "lon", "lat")
MAX_BAD_FRACTION = 0.5


@dataclass(frozen=True)
class TripRecord:
    start_time: float
    end_time: float
    start_lon: float
    start_lat: float
    end_lon: float
    end_lat: float


@dataclass
class IngestReport:
    rows: int = 0
    accepted: int = 0
    unparseable: int = 0
    end_before_start: int = 0
    out_of_bounds: int = 0
    outside_window: int = 0

    @property
    def bad(self):
        return self.unparseable + self.end_before_start + self.out_of_bounds

    @property
    def rejected(self):
        return self.bad + self.outside_window

    def as_dict(self):
        return {
            "rows": self.rows, "accepted": self.accepted, "rejected": self.rejected,
            "unparseable": self.unparseable, "end_before_start": self.end_before_start,
            "out_of_bounds": self.out_of_bounds, "outside_window": self.outside_window,
        }


@dataclass
class TripTable:
    """Columnar trips; iterating yields :class:`TripRecord`."""

    start_time: np.ndarray
    end_time: np.ndarray
    start_lon: np.ndarray
    start_lat: np.ndarray
    end_lon: np.ndarray
    end_lat: np.ndarray
    report: IngestReport = field(default_factory=IngestReport)

    def __len__(self):
        return len(self.start_time)

    def __iter__(self):
        for row in zip(self.start_time, self.end_time, self.start_lon, self.start_lat,
                       self.end_lon, self.end_lat):
            yield TripRecord(*map(float, row))

    @classmethod
    def from_records(cls, records):
        cols = np.array([[r.start_time, r.end_time, r.start_lon, r.start_lat, r.end_lon, r.end_lat]
                         for r in records], dtype=float).reshape(-1, 6)
        return cls(*cols.T, report=IngestReport(rows=len(cols), accepted=len(cols)))


@dataclass
class FlowCube:
    values: np.ndarray


@dataclass
class TransitionCube:
    values: np.ndarray
    m_span: int
    skipped: int = 0


@dataclass
class AccidentCube:
    values: np.ndarray
    report: IngestReport = field(default_factory=IngestReport)


# -- ingestion ---------------------------------------------------------------

def _read_csv(path, columns):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not text.strip():
        return pd.DataFrame({c: pd.Series(dtype=object) for c in columns})
    frame = pd.read_csv(StringIO(text), dtype=str, skipinitialspace=True)
    frame.columns = [c.strip() for c in frame.columns]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputError(f"{path}: missing header column(s) {', '.join(missing)}; "
                         f"expected {','.join(columns)}")
    return frame[list(columns)]


def parse_timestamps(col):
    """Epoch seconds or ISO-8601 strings to float epoch seconds (NaN if neither)."""
    col = col.astype(object)
    numeric = pd.to_numeric(col, errors="coerce")
    todo = numeric.isna() & col.notna()
    if todo.any():
        parsed = pd.to_datetime(col[todo], utc=True, errors="coerce", format="ISO8601")
        seconds = (parsed - pd.Timestamp(0, tz="UTC")) / pd.Timedelta(seconds=1)
        numeric = numeric.astype(float)
        numeric[todo] = seconds.astype(float)
    return numeric.to_numpy(dtype=float)


def _in_bbox(lon, lat, grid):
    return ((lon >= grid.lon_min) & (lon < grid.lon_max)
            & (lat >= grid.lat_min) & (lat < grid.lat_max))


def _window_end(grid):
    if grid.num_intervals < 1:
        raise ConfigError("grid.num_intervals must be set (> 0) before building cubes")
    return grid.t0 + grid.num_intervals * grid.interval_seconds


def _check_quality(report, path):
    # only unparseable rows are fatal; bounds and ordering rejects are just reported
    if report.rows and report.unparseable > MAX_BAD_FRACTION * report.rows:
        raise DataQualityError(
            f"{path}: {report.unparseable} of {report.rows} rows are unparseable")


def infer_num_intervals(path, grid):
    """Intervals from ``grid.t0`` through the latest parseable trip end time."""
    frame = _read_csv(path, TRIP_COLUMNS)
    end = parse_timestamps(frame["end_time"])
    end = end[np.isfinite(end) & (end >= grid.t0)]
    if not len(end):
        raise DataQualityError(f"{path}: no trip ends at or after grid.t0={grid.t0}")
    return int(interval_index(end.max(), grid)) + 1


def ingest_trips(path, grid):
    frame = _read_csv(path, TRIP_COLUMNS)
    end_of_window = _window_end(grid)
    t_start = parse_timestamps(frame["start_time"])
    t_end = parse_timestamps(frame["end_time"])
    coords = [pd.to_numeric(frame[c], errors="coerce").to_numpy(dtype=float)
              for c in TRIP_COLUMNS[2:]]
    report = IngestReport(rows=len(frame))
    parsed = np.isfinite(t_start) & np.isfinite(t_end)
    for c in coords:
        parsed &= np.isfinite(c)
    report.unparseable = int((~parsed).sum())
    ordered = parsed & (t_end >= t_start)
    report.end_before_start = int((parsed & ~ordered).sum())
    inside = ordered & _in_bbox(coords[0], coords[1], grid) & _in_bbox(coords[2], coords[3], grid)
    report.out_of_bounds = int((ordered & ~inside).sum())
    in_window = inside & (t_start >= grid.t0) & (t_end < end_of_window)
    report.outside_window = int((inside & ~in_window).sum())
    report.accepted = int(in_window.sum())
    _check_quality(report, path)
    if report.rejected:
        log.info("%s: rejected %d of %d trip rows %s", path, report.rejected, report.rows,
                 report.as_dict())
    keep = in_window
    return TripTable(t_start[keep], t_end[keep], *(c[keep] for c in coords), report=report)


def ingest_accidents(path, grid):
    frame = _read_csv(path, ACCIDENT_COLUMNS)
    end_of_window = _window_end(grid)
    t = parse_timestamps(frame["time"])
    lon = pd.to_numeric(frame["lon"], errors="coerce").to_numpy(dtype=float)
    lat = pd.to_numeric(frame["lat"], errors="coerce").to_numpy(dtype=float)
    report = IngestReport(rows=len(frame))
    parsed = np.isfinite(t) & np.isfinite(lon) & np.isfinite(lat)
    report.unparseable = int((~parsed).sum())
    inside = parsed & _in_bbox(lon, lat, grid)
    report.out_of_bounds = int((parsed & ~inside).sum())
    keep = inside & (t >= grid.t0) & (t < end_of_window)
    report.outside_window = int((inside & ~keep).sum())
    report.accepted = int(keep.sum())
    _check_quality(report, path)
    values = np.zeros((grid.x_cells, grid.y_cells, grid.num_intervals, 1))
    cx, cy = cell_index(lon[keep], lat[keep], grid)
    np.add.at(values, (cx, cy, interval_index(t[keep], grid), 0), 1.0)
    return AccidentCube(values, report)


# -- cube construction -----------------------------------------------------------

def cell_index(lon, lat, grid):
    dlon = (grid.lon_max - grid.lon_min) / grid.x_cells
    dlat = (grid.lat_max - grid.lat_min) / grid.y_cells
    cx = np.floor((np.asarray(lon) - grid.lon_min) / dlon).astype(np.int64)
    cy = np.floor((np.asarray(lat) - grid.lat_min) / dlat).astype(np.int64)
    # rounding can push a coordinate just below lon_max into a nonexistent cell
    return np.clip(cx, 0, grid.x_cells - 1), np.clip(cy, 0, grid.y_cells - 1)


def interval_index(t, grid):
    return np.floor((np.asarray(t, dtype=float) - grid.t0) / grid.interval_seconds).astype(np.int64)


def _locate(trips, grid):
    _window_end(grid)
    sx, sy = cell_index(trips.start_lon, trips.start_lat, grid)
    ex, ey = cell_index(trips.end_lon, trips.end_lat, grid)
    ts = interval_index(trips.start_time, grid)
    te = interval_index(trips.end_time, grid)
    valid = ((ts >= 0) & (te < grid.num_intervals) & (te >= ts)
             & _in_bbox(trips.start_lon, trips.start_lat, grid)
             & _in_bbox(trips.end_lon, trips.end_lat, grid))
    cross = valid & ((sx != ex) | (sy != ey))
    return sx, sy, ex, ey, ts, te, cross


def compute_flow(trips, grid):
    """Count each cross-cell trip as outflow at its origin/start and inflow at its destination/end."""
    sx, sy, ex, ey, ts, te, cross = _locate(trips, grid)
    values = np.zeros((grid.x_cells, grid.y_cells, grid.num_intervals, 2))
    np.add.at(values, (ex[cross], ey[cross], te[cross], 0), 1.0)
    np.add.at(values, (sx[cross], sy[cross], ts[cross], 1), 1.0)
    return FlowCube(values)


def compute_transitions(trips, grid, m_span):
    """Origin-destination counts; trips spanning more than ``m_span`` intervals are skipped."""
    if m_span < 1:
        raise ConfigError(f"m_span must be >= 1, got {m_span}")
    sx, sy, ex, ey, ts, te, cross = _locate(trips, grid)
    keep = cross & (te - ts <= m_span)
    x, y, T = grid.x_cells, grid.y_cells, grid.num_intervals
    values = np.zeros((x, y, x, y, T, 2))
    o = (sx[keep], sy[keep], ex[keep], ey[keep])
    np.add.at(values, (*o, te[keep], 0), 1.0)
    np.add.at(values, (*o, ts[keep], 1), 1.0)
    return TransitionCube(values, m_span, skipped=int((cross & ~keep).sum()))


def _region_xy(region, x_cells, y_cells):
    if isinstance(region, (tuple, list)):
        cx, cy = region
    else:
        if not 0 <= region < x_cells * y_cells:
            raise ContractError(f"region {region} out of range for a {x_cells}x{y_cells} grid")
        cx, cy = divmod(int(region), y_cells)
    if not (0 <= cx < x_cells and 0 <= cy < y_cells):
        raise ContractError(f"region {region} out of range for a {x_cells}x{y_cells} grid")
    return cx, cy


def region_transition_view(tc, region):
    """``[x, y, T, 2]``: channel 0 arrivals into ``region`` by origin, 1 departures by destination."""
    v = tc.values if isinstance(tc, TransitionCube) else tc
    cx, cy = _region_xy(region, v.shape[0], v.shape[1])
    return np.stack([v[:, :, cx, cy, :, 0], v[cx, cy, :, :, :, 1]], axis=-1)


def spatial_pool(view, region, m):
    """The ``m x m`` patch of ``view`` centered on ``region``, zero-padded at the borders."""
    if m % 2 == 0:
        raise ConfigError(f"pool size must be odd, got {m}")
    cx, cy = _region_xy(region, view.shape[0], view.shape[1])
    h = m // 2
    padded = np.pad(view, [(h, h), (h, h)] + [(0, 0)] * (view.ndim - 2))
    return padded[cx:cx + m, cy:cy + m]


def patch_series(view, region, m):
    """Reshape the pooled patch ``[m, m, T, 2]`` to ``[T, 2*m*m]`` (cell-major, channel-minor)."""
    patch = spatial_pool(view, region, m)
    return np.moveaxis(patch, 2, 0).reshape(patch.shape[2], -1)


# -- scaling / splitting ---------------------------------------------------------------

@dataclass
class ScalerParams:
    min: np.ndarray
    max: np.ndarray

    def apply(self, values):
        return minmax_apply(self, values)

    def invert(self, values):
        return minmax_invert(self, values)


def minmax_fit(values):
    """Per-channel (last axis) min and max of the training portion."""
    flat = np.asarray(values, dtype=float).reshape(-1, np.shape(values)[-1])
    if flat.shape[0] == 0:
        raise ContractError("cannot fit a scaler on an empty array")
    return ScalerParams(flat.min(axis=0), flat.max(axis=0))


def _span(sc):
    span = sc.max - sc.min
    return np.where(span > 0, span, 1.0), span > 0


def minmax_apply(sc, values):
    span, live = _span(sc)
    return np.where(live, (np.asarray(values, dtype=float) - sc.min) / span, 0.0)


def minmax_invert(sc, values):
    span, live = _span(sc)
    return np.where(live, np.asarray(values, dtype=float) * span + sc.min, sc.min)


def split_train_test(T, fraction):
    if not 0 < fraction < 1:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    n_train = int(np.floor(fraction * T))
    if n_train < 1 or n_train >= T:
        raise ConfigError(f"split of {T} intervals at {fraction} leaves an empty side")
    return range(0, n_train), range(n_train, T)


# -- windows -------------------------------------------------------------------

def time_features(t0, interval_seconds, intervals):
    """Interval-of-day and day-of-week (Monday=0, UTC) for absolute interval indices."""
    ts = t0 + np.asarray(intervals, dtype=np.int64) * interval_seconds
    iod = (ts % 86400) // interval_seconds
    dow = ((ts // 86400) + 3) % 7
    return iod.astype(np.int64), dow.astype(np.int64)


@dataclass
class SampleWindow:
    region: int
    start: int
    encoder_input: np.ndarray
    transition_totals: np.ndarray
    accident_series: np.ndarray
    interval_of_day: np.ndarray
    day_of_week: np.ndarray
    decoder_input: np.ndarray
    target: np.ndarray

    @property
    def target_interval(self):
        return self.start + len(self.decoder_input)


@dataclass
class WindowSet:
    """Stacked windows; indexing with an int yields a :class:`SampleWindow`."""

    region: np.ndarray
    start: np.ndarray
    patches: np.ndarray
    totals: np.ndarray
    accidents: np.ndarray
    iod: np.ndarray
    dow: np.ndarray
    dec_in: np.ndarray
    target: np.ndarray

    FIELDS = ("region", "start", "patches", "totals", "accidents", "iod", "dow", "dec_in", "target")

    def __len__(self):
        return len(self.region)

    @property
    def t_hist(self):
        return self.dec_in.shape[1]

    @property
    def target_interval(self):
        return self.start + self.t_hist

    def __getitem__(self, i):
        if not isinstance(i, (int, np.integer)):
            return self.subset(i)
        return SampleWindow(int(self.region[i]), int(self.start[i]), self.patches[i],
                            self.totals[i], self.accidents[i], self.iod[i], self.dow[i],
                            self.dec_in[i], self.target[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx):
        return WindowSet(*(getattr(self, f)[idx] for f in self.FIELDS))

    def with_target(self, target):
        out = self.subset(slice(None))
        out.target = np.asarray(target, dtype=float)
        return out


def make_windows(flow, transitions, accidents, t_hist, interval_range, m_pool, grid):
    """One window per (region, start) whose inputs and target all lie in ``interval_range``.

    ``flow`` and ``transitions`` are (typically scaled) cube arrays, ``accidents``
    raw counts. Window ``s`` covers intervals ``s .. s+t_hist-1`` and targets
    ``s+t_hist``.
    """
    lo, hi = interval_range.start, interval_range.stop
    if t_hist < 2:
        raise ConfigError(f"t_hist must be >= 2, got {t_hist}")
    if hi - lo <= t_hist:
        raise ConfigError(f"range of {hi - lo} intervals is too short for t_hist={t_hist}")
    flow = getattr(flow, "values", flow)
    transitions = getattr(transitions, "values", transitions)
    accidents = getattr(accidents, "values", accidents)
    x, y = flow.shape[:2]
    n_start = hi - lo - t_hist
    starts = np.arange(lo, lo + n_start)
    idx = starts[:, None] + np.arange(t_hist)[None, :]
    iod_all, dow_all = time_features(grid.t0, grid.interval_seconds, np.arange(hi))
    parts = {f: [] for f in WindowSet.FIELDS}
    for region in range(x * y):
        cx, cy = divmod(region, y)
        view = region_transition_view(transitions[..., lo:hi, :], region)
        series = patch_series(view, region, m_pool)
        totals = view.sum(axis=(0, 1))
        v = flow[cx, cy]
        parts["region"].append(np.full(n_start, region))
        parts["start"].append(starts)
        parts["patches"].append(series[idx - lo])
        parts["totals"].append(totals[idx - lo])
        parts["accidents"].append(accidents[cx, cy, :, 0][idx])
        parts["iod"].append(iod_all[idx])
        parts["dow"].append(dow_all[idx])
        parts["dec_in"].append(v[idx])
        parts["target"].append(v[starts + t_hist])
    return WindowSet(*(np.concatenate(parts[f]) for f in WindowSet.FIELDS))


# -- full preparation ------------------------------------------------------------

@dataclass
class Dataset:
    grid: object
    train: WindowSet
    val: WindowSet
    test: WindowSet
    flow_scaler: ScalerParams
    transition_scaler: ScalerParams
    region_means: np.ndarray
    train_range: range
    test_range: range
    flow_raw: np.ndarray


def prepare_dataset(flow, transitions, accidents, grid, data_cfg, model_cfg, scalers=None):
    """Split, scale (fit on the training prefix only) and window the cubes.

    Training windows lie entirely inside the training prefix; the last
    ``val_fraction`` of it is held out for checkpoint selection. Test windows
    target every interval of the test suffix, so their history may start in
    the training range. ``scalers`` is an optional ``(flow, transitions)`` pair
    reused instead of refitting (e.g. the ones stored with a checkpoint).
    """
    flow = getattr(flow, "values", flow)
    transitions = getattr(transitions, "values", transitions)
    accidents = getattr(accidents, "values", accidents)
    T = flow.shape[2]
    train_range, test_range = split_train_test(T, data_cfg.train_fraction)
    t_hist = model_cfg.t_hist
    if scalers is None:
        flow_scaler = minmax_fit(flow[:, :, train_range.start:train_range.stop])
        trans_scaler = minmax_fit(transitions[..., train_range.start:train_range.stop, :])
    else:
        flow_scaler, trans_scaler = scalers
    flow_s = minmax_apply(flow_scaler, flow)
    trans_s = minmax_apply(trans_scaler, transitions)
    n_val = int(np.floor(data_cfg.val_fraction * len(train_range)))
    if n_val and n_val <= t_hist:
        n_val = 0
    fit_range = range(train_range.start, train_range.stop - n_val)
    val_range = range(train_range.stop - n_val, train_range.stop)
    windows = lambda r: make_windows(flow_s, trans_s, accidents, t_hist, r, model_cfg.m_pool, grid)
    train = windows(fit_range)
    val = windows(val_range) if n_val else train.subset(slice(0, 0))
    test = windows(range(max(0, test_range.start - t_hist), test_range.stop))
    region_means = flow[:, :, train_range.start:train_range.stop].mean(axis=(2, 3)).reshape(-1)
    return Dataset(grid, train, val, test, flow_scaler, trans_scaler, region_means,
                   train_range, test_range, flow)
