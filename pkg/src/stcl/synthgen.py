"""Deterministic synthetic city: Poisson trips between neighbouring cells plus accidents.

Departure intensity for cell ``c`` in interval ``t``::

    base_rate * (1 + daily_amplitude * sin(2*pi*interval_of_day / z)) * weekday_factor[dow]

An accident in cell ``c`` at ``t`` affects ``c`` and its 4-neighbours during
``[t + lag, t + lag + duration)``: their departure intensity is multiplied by
``accident_suppression``, and trips choosing a destination weight affected
cells ``1 / accident_boost`` as strongly as unaffected ones (traffic is routed
around the incident).

Accident and trip counts are drawn by Poisson inversion from a fixed uniform
per (cell, interval), and every per-trip attribute comes from candidate trips drawn
at the accident-free intensity. Raising the accident rate or injecting an
accident therefore only ever removes trips (for ``accident_suppression <= 1``).
"""
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import poisson

from stcl.dataflow import (
    TRIP_COLUMNS, AccidentCube, TripTable, compute_flow, compute_transitions, time_features,
)
from stcl.rng import stream

NEIGHBOURS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass
class SynthOutput:
    trips: dict
    accidents: dict
    intensity: np.ndarray
    base_intensity: np.ndarray
    affected: np.ndarray
    accident_counts: np.ndarray
    grid: object

    @property
    def num_trips(self):
        return len(self.trips["start_time"])

    def departures(self):
        """Emitted departures per ``[x, y, T]``."""
        g = self.grid
        out = np.zeros((g.x_cells, g.y_cells, g.num_intervals))
        np.add.at(out, (self.trips["_sx"], self.trips["_sy"], self.trips["_ts"]), 1.0)
        return out

    def trip_table(self):
        return TripTable(**{k: np.asarray(self.trips[k], dtype=float) for k in TRIP_COLUMNS})

    def cubes(self, m_span):
        """Flow, transition and accident cubes without a CSV round trip."""
        table = self.trip_table()
        flow = compute_flow(table, self.grid)
        transitions = compute_transitions(table, self.grid, m_span)
        accidents = AccidentCube(self.accident_counts[..., None].astype(float))
        return flow, transitions, accidents

    def write(self, trips_path, accidents_path):
        write_trips_csv(trips_path, self.trips)
        write_accidents_csv(accidents_path, self.accidents)


def _intensity_profile(grid, cfg):
    z = grid.intervals_per_day
    iod, dow = time_features(grid.t0, grid.interval_seconds, np.arange(grid.num_intervals))
    daily = 1.0 + cfg.daily_amplitude * np.sin(2.0 * math.pi * iod / z)
    weekly = np.asarray(cfg.weekday_factor, dtype=float)[dow]
    return np.maximum(cfg.base_rate * daily * weekly, 0.0)


def _neighbour_table(grid):
    x, y = grid.x_cells, grid.y_cells
    nx = np.zeros((x, y, 4), dtype=np.int64)
    ny = np.zeros((x, y, 4), dtype=np.int64)
    ok = np.zeros((x, y, 4), dtype=bool)
    for i in range(x):
        for j in range(y):
            for n, (dx, dy) in enumerate(NEIGHBOURS):
                a, b = i + dx, j + dy
                if 0 <= a < x and 0 <= b < y:
                    nx[i, j, n], ny[i, j, n], ok[i, j, n] = a, b, True
    return nx, ny, ok


def _affected(counts, cfg, nx, ny, ok):
    x, y, T = counts.shape
    hit = np.zeros((x, y, T), dtype=bool)
    for i, j, t in zip(*np.nonzero(counts)):
        lo = t + cfg.accident_lag
        hi = min(T, lo + cfg.accident_duration)
        if lo >= T:
            continue
        hit[i, j, lo:hi] = True
        for n in range(4):
            if ok[i, j, n]:
                hit[nx[i, j, n], ny[i, j, n], lo:hi] = True
    return hit


def _uniform_in_cell(rng, cells, n_cells, lo, hi):
    width = (hi - lo) / n_cells
    return lo + (cells + rng.uniform(0.1, 0.9, len(cells))) * width


def generate(cfg, grid, extra_accidents=()):
    """Generate trips and accidents for ``grid`` (``num_intervals`` 0 means ``cfg.days``).

    ``extra_accidents`` is an iterable of ``(cx, cy, t)`` accidents added on top
    of the sampled ones; it only touches the accident stream, so the trip
    streams stay paired with the run without it.
    """
    cfg.validate()
    if grid.num_intervals < 1:
        grid = replace(grid, num_intervals=cfg.days * grid.intervals_per_day)
    grid.validate()
    x, y, T = grid.x_cells, grid.y_cells, grid.num_intervals
    dt = grid.interval_seconds
    nx, ny, ok = _neighbour_table(grid)

    # inversion on a fixed uniform: a higher rate only ever adds accidents
    u_acc = np.clip(stream(cfg.seed, "accidents").random((x, y, T)), 1e-300, 1.0 - 1e-16)
    acc = poisson.ppf(u_acc, cfg.accident_rate).astype(np.int64)
    for cx, cy, t in extra_accidents:
        acc[cx, cy, t] += 1
    affected = _affected(acc, cfg, nx, ny, ok)

    profile = _intensity_profile(grid, cfg)
    base = np.broadcast_to(profile, (x, y, T))
    actual = np.where(affected, base * cfg.accident_suppression, base)
    ceiling = base * max(1.0, cfg.accident_suppression)

    u = stream(cfg.seed, "counts").random((x, y, T))
    u = np.clip(u, 1e-300, 1.0 - 1e-16)
    n_cand = poisson.ppf(u, ceiling).astype(np.int64)
    n_keep = np.minimum(poisson.ppf(u, actual).astype(np.int64), n_cand)

    # one candidate row per possible trip; attributes independent of accidents
    cell_t = np.repeat(np.arange(x * y * T), n_cand.ravel())
    rank = np.arange(len(cell_t)) - np.repeat(np.cumsum(n_cand.ravel()) - n_cand.ravel(),
                                              n_cand.ravel())
    sx, rest = np.divmod(cell_t, y * T)
    sy, ts = np.divmod(rest, T)
    offset = stream(cfg.seed, "offset").random(len(cell_t))
    duration = stream(cfg.seed, "duration").exponential(cfg.trip_minutes * 60.0, len(cell_t))
    pick = stream(cfg.seed, "destination").random(len(cell_t))
    coord_rng = stream(cfg.seed, "coords")
    start = grid.t0 + ts * dt + np.floor(offset * dt)
    end = start + np.floor(duration)

    # destination among in-grid 4-neighbours, down-weighting affected cells
    cand_x, cand_y, valid = nx[sx, sy], ny[sx, sy], ok[sx, sy]
    hit = affected[cand_x, cand_y, ts[:, None]]
    w = np.where(valid, np.where(hit, 1.0 / cfg.accident_boost, 1.0), 0.0)
    cdf = np.cumsum(w, axis=1)
    choice = (pick[:, None] * cdf[:, -1:] >= cdf).sum(axis=1)
    choice = np.minimum(choice, 3)
    ex = cand_x[np.arange(len(choice)), choice]
    ey = cand_y[np.arange(len(choice)), choice]

    keep = (rank < n_keep.ravel()[cell_t]) & (end < grid.t0 + T * dt)
    coords = {
        "start_lon": _uniform_in_cell(coord_rng, sx, x, grid.lon_min, grid.lon_max),
        "start_lat": _uniform_in_cell(coord_rng, sy, y, grid.lat_min, grid.lat_max),
        "end_lon": _uniform_in_cell(coord_rng, ex, x, grid.lon_min, grid.lon_max),
        "end_lat": _uniform_in_cell(coord_rng, ey, y, grid.lat_min, grid.lat_max),
    }
    trips = {"start_time": start[keep].astype(np.int64), "end_time": end[keep].astype(np.int64)}
    trips.update({k: v[keep] for k, v in coords.items()})
    trips.update({"_sx": sx[keep], "_sy": sy[keep], "_ts": ts[keep]})

    ai, aj, at = np.nonzero(acc)
    reps = acc[ai, aj, at]
    ai, aj, at = (np.repeat(v, reps) for v in (ai, aj, at))
    arng = stream(cfg.seed, "accident_coords")
    accidents = {
        "time": (grid.t0 + at * dt + np.floor(arng.random(len(at)) * dt)).astype(np.int64),
        "lon": _uniform_in_cell(arng, ai, x, grid.lon_min, grid.lon_max),
        "lat": _uniform_in_cell(arng, aj, y, grid.lat_min, grid.lat_max),
    }
    order = np.argsort(accidents["time"], kind="stable")
    accidents = {k: v[order] for k, v in accidents.items()}
    return SynthOutput(trips, accidents, actual, np.array(base), affected, acc, grid)


def write_trips_csv(path, trips):
    cols = (trips["start_time"], trips["end_time"], trips["start_lon"], trips["start_lat"],
            trips["end_lon"], trips["end_lat"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("start_time,end_time,start_lon,start_lat,end_lon,end_lat\n")
        for row in zip(*cols):
            fh.write("%d,%d,%.6f,%.6f,%.6f,%.6f\n" % row)


def write_accidents_csv(path, accidents):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("time,lon,lat\n")
        for row in zip(accidents["time"], accidents["lon"], accidents["lat"]):
            fh.write("%d,%.6f,%.6f\n" % row)
