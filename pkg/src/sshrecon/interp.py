"""Reconstruction engines and the sliding-window protocol.

* ``oi_reconstruct``: local simple kriging with a separable Gaussian covariance.
* ``variational_reconstruct``: gradient descent with backtracking on an
  observation loss plus a quadratic smoothness prior, warm started from OI.
* ``run_windows``: slides a fixed-length window over the record, runs an
  engine per window and ensemble member, and keeps the central frames.
* ``nearest_baseline``: daily rasterised observations filled by nearest neighbour.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .gridcore import Field, GridError, GridSpec, TrackSet
from .objective import DerivNorm, LossParams, NoConstraintError, NormStats, TrackProblem
from .obssim import KM_PER_DEG, rasterize_tracks


# --------------------------------------------------------------------------- optimal interpolation


@dataclass(frozen=True)
class OiParams:
    length_scale_km: float = 60.0
    time_scale_days: float = 5.0
    obs_noise_var: float = 0.019**2  # m^2
    max_neighbors: int = 32
    signal_var: float = 0.01  # m^2
    prior_mean: float | None = 0.0  # None: use the mean of the observations
    superobs: bool = True
    block: int = 4  # pixels per tile side sharing one neighbour set

    def __post_init__(self):
        if self.length_scale_km <= 0 or self.time_scale_days <= 0:
            raise ValueError("OI scales must be positive")
        if self.max_neighbors < 1 or self.block < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.obs_noise_var < 0 or self.signal_var <= 0:
            raise ValueError("variances must be non-negative (signal_var positive)")


def superobs(obs: TrackSet, spec: GridSpec) -> tuple[TrackSet, np.ndarray]:
    """Average samples sharing satellite, UTC day and grid pixel.

    Returns the averaged points (mean position, time and value) and the number
    of samples behind each one.
    """
    if len(obs) == 0:
        return obs, np.zeros(0)
    i = np.floor((spec.lat0 - obs.lat) / spec.dlat + 0.5).astype(np.int64)
    j = np.floor((obs.lon - spec.lon0) / spec.dlon + 0.5).astype(np.int64)
    day = np.floor(obs.t).astype(np.int64)
    keys = np.stack([obs.sat_id, day, i, j], axis=1)
    uniq, inv, count = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()

    def avg(a):
        return np.bincount(inv, weights=a, minlength=len(uniq)) / count

    pts = TrackSet(uniq[:, 0], avg(obs.t), avg(obs.seconds_of_day), avg(obs.lat), avg(obs.lon), avg(obs.value))
    # TrackSet sorts its rows; recover the matching counts
    c = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    order = np.lexsort((avg(obs.seconds_of_day), avg(obs.t), uniq[:, 0]))
    return pts, c[order]


def _scaled_coords(t, lat, lon, spec: GridSpec, p: OiParams) -> np.ndarray:
    # local tangent plane at the box centre, in units of the correlation scales
    coslat = math.cos(math.radians(spec.lat_center))
    x = (np.asarray(lon) - spec.lon_center) * KM_PER_DEG * coslat / p.length_scale_km
    y = (np.asarray(lat) - spec.lat_center) * KM_PER_DEG / p.length_scale_km
    s = np.asarray(t) / p.time_scale_days
    return np.column_stack([np.ravel(x), np.ravel(y), np.ravel(s)])


def _solve_batch(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        n = K.shape[-1]
        try:
            return np.linalg.solve(K + 1e-10 * np.eye(n), rhs)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular local OI system even after jitter") from exc


def oi_reconstruct(obs: TrackSet, spec: GridSpec, p: OiParams = OiParams(), chunk: int = 512) -> Field:
    """Simple kriging on every grid cell.

    Cells are handled in ``block x block`` pixel tiles per time step: all cells
    of a tile share the ``max_neighbors`` observations nearest to the tile
    centre, so each tile needs a single factorisation.
    """
    if len(obs) == 0:
        raise NoConstraintError("no constraint points")
    if p.superobs:
        pts, count = superobs(obs, spec)
    else:
        pts, count = obs, np.ones(len(obs))
    nugget = p.obs_noise_var / count
    mean = float(np.mean(pts.value)) if p.prior_mean is None else p.prior_mean
    anomaly = pts.value - mean
    X = _scaled_coords(pts.t, pts.lat, pts.lon, spec, p)
    k = min(p.max_neighbors, len(pts))
    tree = cKDTree(X)
    b = p.block
    nby, nbx = -(-spec.nlat // b), -(-spec.nlon // b)
    # cell coordinates grouped by tile: (n_tiles, b*b, 3), padded tiles repeat their last row/col
    rows = np.minimum(np.arange(nby * b), spec.nlat - 1).reshape(nby, b)
    cols = np.minimum(np.arange(nbx * b), spec.nlon - 1).reshape(nbx, b)
    kk, ty, tx, iy, ix = np.meshgrid(np.arange(spec.nt), np.arange(nby), np.arange(nbx), np.arange(b), np.arange(b),
                                     indexing="ij")
    ri = rows[ty, iy].reshape(-1, b * b)
    ci = cols[tx, ix].reshape(-1, b * b)
    ki = kk.reshape(-1, b * b)
    G = _scaled_coords(spec.times[ki], spec.lats[ri], spec.lons[ci], spec, p).reshape(ki.shape[0], b * b, 3)
    out = np.empty(spec.shape)
    for start in range(0, len(G), chunk):
        g = G[start:start + chunk]
        _, idx = tree.query(g.mean(axis=1), k=k)
        idx = np.asarray(idx).reshape(len(g), k)
        Xn = X[idx]
        d2 = np.sum((Xn[:, :, None, :] - Xn[:, None, :, :]) ** 2, axis=-1)
        K = p.signal_var * np.exp(-0.5 * d2)
        K[:, np.arange(k), np.arange(k)] += nugget[idx]
        kv = p.signal_var * np.exp(-0.5 * np.sum((Xn[:, :, None, :] - g[:, None, :, :]) ** 2, axis=-1))
        w = _solve_batch(K, kv)  # (tiles, k, cells)
        est = mean + np.einsum("tkc,tk->tc", w, anomaly[idx])
        sl = slice(start, start + len(g))
        out[ki[sl], ri[sl], ci[sl]] = est
    return Field(spec, out, "m")


def nearest_baseline(obs: TrackSet, spec: GridSpec) -> Field:
    """Daily rasterised observations, empty cells filled from the nearest observed cell in (t, y, x)."""
    if len(obs) == 0:
        raise NoConstraintError("no constraint points")
    mean, count = rasterize_tracks(obs, spec)
    empty = count.values == 0
    if empty.all():
        raise NoConstraintError("no observations fall inside the grid")
    _, inds = ndimage.distance_transform_edt(empty, return_indices=True)
    return Field(spec, mean.values[tuple(inds)], "m")


# --------------------------------------------------------------------------- variational solver


@dataclass(frozen=True)
class VarParams:
    loss_kind: str = "unsup"
    lambda1: float = 0.05
    lambda2: float = 0.05
    smooth_weight: float = 0.1
    time_weight: float = 1.0
    max_iters: int = 2000
    step_init: float = 0.5
    step_decay: float = 0.5
    step_grow: float = 2.0
    tol_rel: float = 1e-6
    grad_tol: float = 1e-12
    init_jitter: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in ("unsup", "unsup_reg"):
            raise ValueError("loss_kind must be 'unsup' or 'unsup_reg'")
        if self.step_init <= 0 or self.tol_rel <= 0 or not 0 < self.step_decay < 1:
            raise ValueError("step_init and tol_rel must be positive, step_decay in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.lambda1, self.lambda2, self.smooth_weight, self.time_weight, self.init_jitter) < 0:
            raise ValueError("weights must be >= 0")

    @property
    def loss_params(self) -> LossParams | None:
        return LossParams(self.lambda1, self.lambda2) if self.loss_kind == "unsup_reg" else None


@dataclass
class VarTrace:
    rows: list = field(default_factory=list)  # (iter, loss, step)
    n_accepted: int = 0
    reason: str = ""

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("iter,loss,step\n")
            for it, loss, step in self.rows:
                fh.write(f"{it},{loss!r},{step!r}\n")


def smoothness(z: np.ndarray, time_weight: float) -> tuple[float, np.ndarray]:
    """Mean squared forward differences (space, plus weighted time) and the gradient."""
    n = z.size
    val = 0.0
    grad = np.zeros_like(z)
    for axis, w in ((0, time_weight), (1, 1.0), (2, 1.0)):
        if w == 0 or z.shape[axis] < 2:
            continue
        d = np.diff(z, axis=axis)
        val += w * np.sum(d * d) / n
        g = 2.0 * w * d / n
        pad = [(0, 0)] * 3
        pad[axis] = (1, 0)
        lo = np.pad(g, pad)
        pad[axis] = (0, 1)
        hi = np.pad(g, pad)
        grad += lo - hi
    return val, grad


def variational_reconstruct(obs: TrackSet, spec: GridSpec, p: VarParams, init: Field,
                            norm: DerivNorm | None = None) -> tuple[Field, VarTrace]:
    """Minimise ``loss(obs, x) + smooth_weight * smoothness(x)`` from ``init``.

    The problem is solved in units normalised by the observation mean and
    standard deviation; the objective is scaled by the number of cells so that
    unit-order steps are sensible.
    """
    if len(obs) == 0:
        raise NoConstraintError("no constraint points")
    if init.spec.shape != spec.shape:
        raise GridError("init grid does not match the target grid")
    ns = NormStats.from_samples(obs.value)
    zobs = obs.with_values(ns.apply(obs.value))
    if norm is not None:
        norm = DerivNorm(NormStats(norm.d1.mean / ns.std, norm.d1.std / ns.std),
                         NormStats(norm.d2.mean / ns.std, norm.d2.std / ns.std))
    prob = TrackProblem(zobs, spec, norm)
    lp = p.loss_params
    scale = float(spec.size)

    def objective(z):
        lv, lg = prob.loss_and_grad(Field(spec, z), lp)
        sv, sg = smoothness(z, p.time_weight) if p.smooth_weight > 0 else (0.0, 0.0)
        return scale * (lv + p.smooth_weight * sv), scale * (lg + p.smooth_weight * sg)

    z = ns.apply(init.values)
    if p.init_jitter > 0:
        z = z + p.init_jitter * np.random.default_rng(p.seed).standard_normal(z.shape)
    J, g = objective(z)
    trace = VarTrace()
    trace.rows.append((0, J, 0.0))
    if not np.isfinite(J):
        raise FloatingPointError("non-finite loss at the initial state")
    step = p.step_init
    for it in range(1, p.max_iters + 1):
        gnorm = math.sqrt(float(np.vdot(g, g)) / g.size)
        if gnorm < p.grad_tol:
            trace.reason = "gradient"
            break
        accepted = False
        for _ in range(60):
            z_new = z - step * g
            J_new, g_new = objective(z_new)
            if not np.isfinite(J_new):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            if J_new < J:
                accepted = True
                break
            step *= p.step_decay
        if not accepted:
            trace.reason = "line search"
            break
        rel = (J - J_new) / max(abs(J), 1e-300)
        z, J, g = z_new, J_new, g_new
        trace.n_accepted += 1
        trace.rows.append((it, J, step))
        step *= p.step_grow
        if rel < p.tol_rel:
            trace.reason = "tol_rel"
            break
    else:
        trace.reason = "max_iters"
    return Field(spec, ns.unapply(z), "m"), trace


# --------------------------------------------------------------------------- engines and windows


class Engine(Protocol):
    def __call__(self, obs: TrackSet, spec: GridSpec, seed: int) -> Field: ...


@dataclass
class OiEngine:
    params: OiParams = OiParams()

    def __call__(self, obs: TrackSet, spec: GridSpec, seed: int = 0) -> Field:
        return oi_reconstruct(obs, spec, self.params)

    def describe(self) -> dict:
        return {"engine": "oi", **asdict(self.params)}


@dataclass
class VarEngine:
    """Variational engine warm started from OI; the OI field is cached per window."""

    params: VarParams = VarParams()
    init_params: OiParams = OiParams()
    norm: DerivNorm | None = None
    traces: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    def init_field(self, obs: TrackSet, spec: GridSpec) -> Field:
        key = (self.init_params, spec, len(obs), hash(obs.t.tobytes()), hash(obs.value.tobytes()))
        if key not in self._cache:
            self._cache[key] = oi_reconstruct(obs, spec, self.init_params)
        return self._cache[key]

    def __call__(self, obs: TrackSet, spec: GridSpec, seed: int = 0) -> Field:
        p = replace(self.params, seed=seed)
        est, trace = variational_reconstruct(obs, spec, p, self.init_field(obs, spec), self.norm)
        self.traces.append(trace)
        return est

    def describe(self) -> dict:
        return {"engine": "var", **asdict(self.params), "init": asdict(self.init_params)}


@dataclass(frozen=True)
class WindowPlan:
    window_len: int = 21
    stride: int = 7
    center_index: int = 10

    def __post_init__(self):
        if self.window_len < 1 or self.stride < 1:
            raise ValueError("window_len and stride must be >= 1")
        if not 0 <= self.center_index < self.window_len:
            raise ValueError("center_index must lie inside the window")

    def starts(self, nt: int) -> np.ndarray:
        if nt < self.window_len:
            raise ValueError("record shorter than one window")
        return np.arange(0, nt - self.window_len + 1, self.stride)


@dataclass
class WindowResult:
    central: Field  # ensemble mean at each window's centre, dt = stride
    members: list  # per-member central Fields
    stitched: Field  # every day taken from the window whose centre is nearest
    offsets: np.ndarray | None  # (n_windows, window_len, nlat, nlon) ensemble mean, when profiling
    starts: np.ndarray
    plan: WindowPlan


def _window_obs(obs: TrackSet, wspec: GridSpec) -> TrackSet:
    return obs.in_time(wspec.t0 - 0.5 * wspec.dt, wspec.t_max + 0.5 * wspec.dt)


def run_windows(obs: TrackSet, spec: GridSpec, plan: WindowPlan, engine, n_ensemble: int = 1,
                seeds=None, profile: bool = False) -> WindowResult:
    if n_ensemble < 1:
        raise ValueError("n_ensemble must be >= 1")
    seeds = list(range(n_ensemble)) if seeds is None else list(seeds)
    if len(seeds) != n_ensemble:
        raise ValueError("need one seed per ensemble member")
    starts = plan.starts(spec.nt)
    L, c = plan.window_len, plan.center_index
    nw = len(starts)
    frames = np.empty((nw, L, spec.nlat, spec.nlon))
    member_central = np.empty((n_ensemble, nw, spec.nlat, spec.nlon))
    for w, s in enumerate(starts):
        wspec = spec.with_time(spec.t0 + s * spec.dt, spec.dt, L)
        wobs = _window_obs(obs, wspec)
        if len(wobs) == 0:
            raise NoConstraintError(f"no observations in the window starting at day {wspec.t0}")
        # mean written as first member plus averaged departures: identical members average exactly
        first = None
        dev = np.zeros((L, spec.nlat, spec.nlon))
        for m, seed in enumerate(seeds):
            est = engine(wobs, wspec, seed).values
            member_central[m, w] = est[c]
            if first is None:
                first = est
            else:
                dev += est - first
        frames[w] = first + dev / n_ensemble if n_ensemble > 1 else first
    cspec = spec.with_time(spec.t0 + (starts[0] + c) * spec.dt, plan.stride * spec.dt, nw)
    central = frames[:, c]
    members = [Field(cspec, member_central[m], "m") for m in range(n_ensemble)]
    # stitched record: nearest window centre, ties to the earlier window
    first, last = starts[0], starts[-1] + L - 1
    days = np.arange(first, last + 1)
    centres = starts + c
    which = np.argmin(np.abs(days[:, None] - centres[None, :]), axis=1)
    which = np.clip(which, 0, nw - 1)
    off = days - starts[which]
    # a day outside the chosen window falls back to the nearest covering one
    out_of = (off < 0) | (off >= L)
    if out_of.any():
        for k in np.where(out_of)[0]:
            cover = np.where((starts <= days[k]) & (starts + L > days[k]))[0]
            which[k] = cover[np.argmin(np.abs(centres[cover] - days[k]))]
        off = days - starts[which]
    sspec = spec.with_time(spec.t0 + first * spec.dt, spec.dt, len(days))
    stitched = Field(sspec, frames[which, off], "m")
    return WindowResult(Field(cspec, central, "m"), members, stitched, frames if profile else None, starts, plan)


def ensemble_mean(fields: list[Field]) -> Field:
    first = fields[0].values
    if len(fields) == 1:
        return fields[0]
    dev = sum(f.values - first for f in fields[1:])
    return fields[0].replace(first + dev / len(fields))
