"""Sensor sampling of solver fields, noise injection, and CSV round-trip.

Observations come in two kinds: "pointwise" values u(x_s, t) and
"accumulative" values, the time mean of u at a sensor over a window
[t0, t1] evaluated by trapezoid quadrature.  Noise is zero-mean Gaussian
with a per-sensor deviation sigma = level * RMS(clean series of that
sensor).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .solver import FieldSeries, Grid

__all__ = [
    "SensorSet", "ObservationSet", "ObservationError",
    "sample_pointwise", "sample_accumulative", "add_noise",
    "select_boundary_data", "write_observations_csv",
    "read_observations_csv", "concat_observations",
]

POINTWISE = "pointwise"
ACCUMULATIVE = "accumulative"


class ObservationError(Exception):
    """Malformed observation data (bad file, out-of-domain point, ...)."""


@dataclass(frozen=True)
class SensorSet:
    """Fixed sensor locations with shared sampling schedule.

    For pointwise sensors `sample_times` are the read-out instants; for
    accumulative sensors they are window start times and each window spans
    `window_steps` solver steps.
    """

    locations: np.ndarray          # (M, dim)
    kind: str = POINTWISE
    sample_times: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    window_steps: int = 30

    def __post_init__(self):
        if self.kind not in (POINTWISE, ACCUMULATIVE):
            raise ValueError(f"unknown sensor kind {self.kind!r}")
        loc = np.asarray(self.locations, dtype=np.float64)
        if loc.ndim != 2:
            raise ValueError("locations must be (n_sensors, dim)")
        if np.any(loc < 0.0) or np.any(loc > 1.0):
            raise ObservationError("sensor location outside the unit domain")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "sample_times",
                           np.asarray(self.sample_times, dtype=np.float64))


@dataclass
class ObservationSet:
    """Flat table of observations; one row per measurement."""

    dim: int
    kinds: list[str]
    locs: np.ndarray        # (N, dim)
    t_start: np.ndarray     # (N,)
    t_end: np.ndarray       # (N,); equals t_start for pointwise rows
    clean: np.ndarray       # (N,)
    noisy: np.ndarray       # (N,)
    sigma: np.ndarray       # (N,)
    sensor_ids: np.ndarray  # (N,) int; groups rows for noise scaling
    window_subdiv: int = 30

    def __post_init__(self):
        n = len(self.kinds)
        for name in ("locs", "t_start", "t_end", "clean", "noisy",
                     "sigma", "sensor_ids"):
            arr = getattr(self, name)
            if arr.shape[0] != n:
                raise ValueError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.locs.shape != (n, self.dim):
            raise ValueError("locs must be (n_obs, dim)")

    def __len__(self) -> int:
        return len(self.kinds)

    def take(self, indices) -> "ObservationSet":
        """Row subset (used e.g. to subsample kernel evaluations)."""
        idx = np.asarray(indices, dtype=int)
        return ObservationSet(
            dim=self.dim, kinds=[self.kinds[i] for i in idx],
            locs=self.locs[idx], t_start=self.t_start[idx],
            t_end=self.t_end[idx], clean=self.clean[idx],
            noisy=self.noisy[idx], sigma=self.sigma[idx],
            sensor_ids=self.sensor_ids[idx],
            window_subdiv=self.window_subdiv)

    def quadrature(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Space-time evaluation points for predicting every row.

        Returns (points (Q, dim+1), weights (Q,), owner (Q,)) where the
        predicted value of row i is the weight-sum of predictions at its
        owned points: a single unit-weight point for pointwise rows,
        trapezoid nodes over the window for accumulative rows.

        The result is cached on the instance; do not mutate it.
        """
        cached = getattr(self, "_quad_cache", None)
        if cached is not None:
            return cached
        pts, wts, owner = [], [], []
        for i, kind in enumerate(self.kinds):
            if kind == POINTWISE:
                pts.append(np.concatenate([self.locs[i],
                                           [self.t_start[i]]])[None, :])
                wts.append(np.array([1.0]))
                owner.append(np.array([i]))
            else:
                m = self.window_subdiv
                ts = np.linspace(self.t_start[i], self.t_end[i], m + 1)
                w = np.full(m + 1, 1.0 / m)
                w[0] = w[-1] = 0.5 / m
                block = np.concatenate(
                    [np.broadcast_to(self.locs[i], (m + 1, self.dim)),
                     ts[:, None]], axis=1)
                pts.append(block)
                wts.append(w)
                owner.append(np.full(m + 1, i, dtype=int))
        result = (np.concatenate(pts, axis=0), np.concatenate(wts),
                  np.concatenate(owner))
        self._quad_cache = result
        return result

    def aggregation(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature points plus the dense (n_obs, Q) matrix that maps
        per-point predictions to per-row predictions.  Cached."""
        cached = getattr(self, "_agg_cache", None)
        if cached is not None:
            return cached
        pts, wts, owner = self.quadrature()
        agg = np.zeros((len(self), pts.shape[0]))
        agg[owner, np.arange(pts.shape[0])] = wts
        result = (pts, agg)
        self._agg_cache = result
        return result


def _interp_stencil(grid: Grid, locs: np.ndarray):
    """Multilinear interpolation stencil: flat corner indices and weights,
    both (M, 2^dim)."""
    if np.any(locs < 0.0) or np.any(locs > 1.0):
        raise ObservationError("interpolation point outside the unit domain")
    n = grid.n_cells
    scaled = locs * n
    lo = np.minimum(np.floor(scaled).astype(int), n - 1)
    frac = scaled - lo
    m, dim = locs.shape
    idx = np.zeros((m, 1), dtype=int)
    wts = np.ones((m, 1))
    stride = np.array([grid.n_nodes ** (dim - 1 - k) for k in range(dim)])
    for k in range(dim):
        idx = np.concatenate([idx + lo[:, k:k + 1] * stride[k],
                              idx + (lo[:, k:k + 1] + 1) * stride[k]], axis=1)
        wts = np.concatenate([wts * (1.0 - frac[:, k:k + 1]),
                              wts * frac[:, k:k + 1]], axis=1)
    return idx, wts


def _series_at_sensors(series: FieldSeries, locs: np.ndarray) -> np.ndarray:
    """u interpolated at sensor locations for every step: (n_steps+1, M)."""
    idx, wts = _interp_stencil(series.grid, locs)
    flat = series.snapshots.reshape(series.snapshots.shape[0], -1)
    return np.einsum("tmc,mc->tm", flat[:, idx], wts)


def _nearest_step(grid: Grid, t: float) -> int:
    k = int(round(t / grid.dt))
    if not (0 <= k <= grid.n_steps) or abs(k * grid.dt - t) > 0.5 * grid.dt + 1e-12:
        raise ObservationError(f"sample time {t} outside the solved interval")
    return k


def _empty_like(dim: int, kinds, locs, t0, t1, clean, sensor_ids,
                window_subdiv=30) -> ObservationSet:
    clean = np.asarray(clean, dtype=np.float64)
    return ObservationSet(
        dim=dim, kinds=list(kinds), locs=np.asarray(locs, dtype=np.float64),
        t_start=np.asarray(t0, dtype=np.float64),
        t_end=np.asarray(t1, dtype=np.float64),
        clean=clean, noisy=clean.copy(),
        sigma=np.zeros_like(clean),
        sensor_ids=np.asarray(sensor_ids, dtype=int),
        window_subdiv=window_subdiv)


def sample_pointwise(series: FieldSeries, sensors: SensorSet) -> ObservationSet:
    if sensors.kind != POINTWISE:
        raise ValueError("sensor set is not pointwise")
    grid = series.grid
    vals = _series_at_sensors(series, sensors.locations)
    m = sensors.locations.shape[0]
    kinds, locs, t0, clean, sids = [], [], [], [], []
    for ti, t in enumerate(sensors.sample_times):
        k = _nearest_step(grid, float(t))
        for s in range(m):
            kinds.append(POINTWISE)
            locs.append(sensors.locations[s])
            t0.append(k * grid.dt)
            clean.append(vals[k, s])
            sids.append(s)
    return _empty_like(grid.dim, kinds, locs, t0, t0, clean, sids)


def sample_accumulative(series: FieldSeries,
                        sensors: SensorSet) -> ObservationSet:
    if sensors.kind != ACCUMULATIVE:
        raise ValueError("sensor set is not accumulative")
    grid = series.grid
    vals = _series_at_sensors(series, sensors.locations)
    m = sensors.locations.shape[0]
    w = sensors.window_steps
    trap = np.full(w + 1, 1.0 / w)
    trap[0] = trap[-1] = 0.5 / w
    kinds, locs, t0s, t1s, clean, sids = [], [], [], [], [], []
    for t in sensors.sample_times:
        k0 = _nearest_step(grid, float(t))
        k1 = k0 + w
        if k1 > grid.n_steps:
            raise ObservationError(
                f"window starting at step {k0} runs past the final step")
        means = trap @ vals[k0:k1 + 1]
        for s in range(m):
            kinds.append(ACCUMULATIVE)
            locs.append(sensors.locations[s])
            t0s.append(k0 * grid.dt)
            t1s.append(k1 * grid.dt)
            clean.append(means[s])
            sids.append(s)
    return _empty_like(grid.dim, kinds, locs, t0s, t1s, clean, sids,
                       window_subdiv=w)


def add_noise(obs: ObservationSet, level: float, seed: int) -> ObservationSet:
    """Gaussian noise, sigma = level * RMS of each sensor's clean series."""
    if level < 0.0:
        raise ValueError("noise level must be nonnegative")
    rng = np.random.default_rng(seed)
    sigma = np.zeros(len(obs))
    for sid in np.unique(obs.sensor_ids):
        sel = obs.sensor_ids == sid
        sigma[sel] = level * np.sqrt(np.mean(obs.clean[sel] ** 2))
    noisy = obs.clean + sigma * rng.standard_normal(len(obs))
    return replace(obs, noisy=noisy, sigma=sigma,
                   locs=obs.locs.copy(), clean=obs.clean.copy(),
                   t_start=obs.t_start.copy(), t_end=obs.t_end.copy(),
                   sensor_ids=obs.sensor_ids.copy(), kinds=list(obs.kinds))


def select_boundary_data(series: FieldSeries, per_mille: float,
                         seed: int) -> ObservationSet:
    """Random subsample of nodal boundary values over all stored steps.

    Keeps ceil(per_mille/1000 * N) of the N boundary space-time samples,
    chosen without replacement with a seeded generator.
    """
    if per_mille <= 0:
        raise ValueError("per_mille must be positive")
    grid = series.grid
    shape = (grid.n_nodes,) * grid.dim
    mask = np.zeros(shape, dtype=bool)
    for k in range(grid.dim):
        sl = [slice(None)] * grid.dim
        sl[k] = 0
        mask[tuple(sl)] = True
        sl[k] = -1
        mask[tuple(sl)] = True
    node_flat = np.flatnonzero(mask.ravel())
    coords = np.stack([m.ravel()[node_flat] for m in grid.node_mesh()], axis=1)
    n_nodes_b = node_flat.size
    n_times = grid.n_steps + 1
    total = n_nodes_b * n_times
    count = int(np.ceil(per_mille / 1000.0 * total))
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=count, replace=False)
    node_i = picks % n_nodes_b
    time_i = picks // n_nodes_b
    flat = series.snapshots.reshape(n_times, -1)
    clean = flat[time_i, node_flat[node_i]]
    times = time_i * grid.dt
    return _empty_like(grid.dim, [POINTWISE] * count, coords[node_i],
                       times, times, clean, node_flat[node_i])


_FLOAT_FMT = "%.17g"


def write_observations_csv(obs: ObservationSet, path) -> None:
    coord_names = ["x", "y", "z"][:obs.dim]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind"] + coord_names +
                        ["t_or_window", "clean", "noisy", "sigma"])
        for i, kind in enumerate(obs.kinds):
            if kind == POINTWISE:
                t_field = _FLOAT_FMT % obs.t_start[i]
            else:
                t_field = (_FLOAT_FMT % obs.t_start[i]) + ".." + \
                          (_FLOAT_FMT % obs.t_end[i])
            writer.writerow(
                [kind] + [_FLOAT_FMT % c for c in obs.locs[i]] +
                [t_field, _FLOAT_FMT % obs.clean[i],
                 _FLOAT_FMT % obs.noisy[i], _FLOAT_FMT % obs.sigma[i]])


def read_observations_csv(path, dim: int) -> ObservationSet:
    coord_names = ["x", "y", "z"][:dim]
    header = ["kind"] + coord_names + ["t_or_window", "clean", "noisy", "sigma"]
    kinds, locs, t0s, t1s, clean, noisy, sigma = [], [], [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if row != header:
                    raise ObservationError(
                        f"{path}:1: expected header {','.join(header)}")
                continue
            if not row:
                continue
            if len(row) != len(header):
                raise ObservationError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(row)}")
            try:
                kind = row[0]
                if kind not in (POINTWISE, ACCUMULATIVE):
                    raise ValueError(f"unknown kind {kind!r}")
                loc = [float(v) for v in row[1:1 + dim]]
                tfield = row[1 + dim]
                if kind == ACCUMULATIVE:
                    if ".." not in tfield:
                        raise ValueError("accumulative row needs t0..t1")
                    a, b = tfield.split("..", 1)
                    t0, t1 = float(a), float(b)
                    if t1 <= t0:
                        raise ValueError("window must have t1 > t0")
                else:
                    t0 = t1 = float(tfield)
                c, nv, sg = (float(row[2 + dim]), float(row[3 + dim]),
                             float(row[4 + dim]))
            except ValueError as exc:
                raise ObservationError(f"{path}:{lineno}: {exc}") from exc
            if any(not (0.0 <= v <= 1.0) for v in loc):
                raise ObservationError(
                    f"{path}:{lineno}: location outside the unit domain")
            if not (0.0 <= t0 <= 1.0 and 0.0 <= t1 <= 1.0):
                raise ObservationError(
                    f"{path}:{lineno}: time outside [0, 1]")
            if sg < 0.0:
                raise ObservationError(f"{path}:{lineno}: negative sigma")
            kinds.append(kind)
            locs.append(loc)
            t0s.append(t0)
            t1s.append(t1)
            clean.append(c)
            noisy.append(nv)
            sigma.append(sg)
    if not kinds:
        raise ObservationError(f"{path}: no observation rows")
    obs = _empty_like(dim, kinds, locs, t0s, t1s, clean,
                      sensor_ids=-np.ones(len(kinds), dtype=int))
    obs.noisy = np.asarray(noisy, dtype=np.float64)
    obs.sigma = np.asarray(sigma, dtype=np.float64)
    return obs


def concat_observations(parts: list[ObservationSet]) -> ObservationSet:
    if not parts:
        raise ValueError("nothing to concatenate")
    dim = parts[0].dim
    if any(p.dim != dim for p in parts):
        raise ValueError("dimension mismatch between observation sets")
    # keep sensor groups disjoint across parts
    shifted, offset = [], 0
    for p in parts:
        ids = p.sensor_ids + offset
        offset = int(ids.max()) + 1 if len(ids) else offset
        shifted.append(ids)
    out = _empty_like(
        dim,
        sum((p.kinds for p in parts), []),
        np.concatenate([p.locs for p in parts]),
        np.concatenate([p.t_start for p in parts]),
        np.concatenate([p.t_end for p in parts]),
        np.concatenate([p.clean for p in parts]),
        np.concatenate(shifted),
        window_subdiv=parts[0].window_subdiv)
    out.noisy = np.concatenate([p.noisy for p in parts])
    out.sigma = np.concatenate([p.sigma for p in parts])
    return out
