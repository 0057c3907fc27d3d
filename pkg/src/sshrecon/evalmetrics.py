"""Reconstruction scores: RMSE suite, spectral resolution, current and along-track errors, window profile."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy import signal

from .dynamics import DEFAULT_CONSTS, PhysConsts, VelocityField, geostrophic_currents
from .gridcore import M_PER_DEG, Field, GridSpec, TrackSet, sample_trilinear

MIN_SPECTRAL_SAMPLES = 16


def _check_aligned(a: Field, b: Field) -> None:
    if a.values.shape != b.values.shape or not a.spec.same_space(b.spec):
        raise ValueError("fields are not aligned")


def lat_band_mask(spec: GridSpec, lat_lo: float, lat_hi: float) -> np.ndarray:
    m = (spec.lats >= lat_lo) & (spec.lats <= lat_hi)
    return np.repeat(m[:, None], spec.nlon, axis=1)


def _region_mask(spec: GridSpec, region) -> np.ndarray:
    if region is None:
        return np.ones((spec.nlat, spec.nlon), bool)
    if isinstance(region, tuple) and len(region) == 2:
        return lat_band_mask(spec, *region)
    mask = np.asarray(region, dtype=bool)
    if mask.shape != (spec.nlat, spec.nlon):
        raise ValueError("region mask does not match the grid")
    return mask


# --------------------------------------------------------------------------- RMSE


@dataclass(frozen=True)
class RmseSuite:
    mu: float
    sigma_t: float
    daily: np.ndarray


def rmse_suite(truth: Field, est: Field, region=None) -> RmseSuite:
    """Overall RMSE, standard deviation of the daily RMSE, and the daily series.

    ``region`` is a (lat_lo, lat_hi) band or a boolean (lat, lon) mask.
    """
    _check_aligned(truth, est)
    mask = _region_mask(truth.spec, region)
    if not mask.any():
        raise ValueError("empty evaluation region")
    err = (est.values - truth.values)[:, mask]
    daily = np.sqrt(np.mean(err**2, axis=1))
    return RmseSuite(float(np.sqrt(np.mean(err**2))), float(np.std(daily)), daily)


# --------------------------------------------------------------------------- spectra


@dataclass(frozen=True)
class SpectralResult:
    wavelength: float
    threshold: float
    units: str
    at_bound: bool  # ratio never reached the threshold; wavelength is the 2-sample bound
    error_free: bool
    freq: np.ndarray = field(repr=False)
    ratio: np.ndarray = field(repr=False)


def mean_psd(x: np.ndarray, axis: int, d: float) -> tuple[np.ndarray, np.ndarray]:
    """One-sided periodogram along ``axis`` (Hann, linear detrend), averaged over the other axes."""
    f, p = signal.periodogram(x, fs=1.0 / d, window="hann", detrend="linear", axis=axis)
    p = np.moveaxis(p, axis, -1).reshape(-1, f.size).mean(axis=0)
    return f, p


def psd_crossing(freq: np.ndarray, ratio: np.ndarray, threshold: float) -> float | None:
    """Frequency where ``ratio`` first reaches ``threshold`` scanning upward, linearly interpolated."""
    hit = np.nonzero(ratio >= threshold)[0]
    if hit.size == 0:
        return None
    i = int(hit[0])
    if i == 0:
        return float(freq[0])
    f0, f1, r0, r1 = freq[i - 1], freq[i], ratio[i - 1], ratio[i]
    if not np.isfinite(r1):
        return float(f1)
    return float(f0 + (threshold - r0) * (f1 - f0) / (r1 - r0))


def _resolution(truth: np.ndarray, est: np.ndarray, axis: int, d: float, threshold: float, units: str) -> SpectralResult:
    n = truth.shape[axis]
    if n < MIN_SPECTRAL_SAMPLES:
        raise ValueError(f"need at least {MIN_SPECTRAL_SAMPLES} samples along the transformed axis")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    f, ps = mean_psd(truth, axis, d)
    _, pe = mean_psd(est - truth, axis, d)
    f, ps, pe = f[1:], ps[1:], pe[1:]
    # detrending a constant leaves only round-off
    if not ps.sum() > 1e-20 * max(float(np.mean(truth**2)), 1e-300):
        raise ValueError("signal has zero variance")
    ratio = np.divide(pe, ps, out=np.where(pe > 0, np.inf, 0.0), where=ps > 0)
    error_free = not np.any(est - truth)
    k = None if error_free else psd_crossing(f, ratio, threshold)
    if k is None:
        return SpectralResult(2 * d, threshold, units, True, error_free, f, ratio)
    return SpectralResult(1.0 / k, threshold, units, False, False, f, ratio)


def lambda_x(truth: Field, est: Field, threshold: float = 1.0, units: str = "deg") -> SpectralResult:
    """Effective zonal resolution: wavelength where error and signal spectra meet."""
    _check_aligned(truth, est)
    spec = truth.spec
    if units == "deg":
        d = spec.dlon
    elif units == "km":
        d = spec.dlon * M_PER_DEG / 1e3 * math.cos(math.radians(spec.lat_center))
    else:
        raise ValueError("units must be 'deg' or 'km'")
    return _resolution(truth.values, est.values, 2, d, threshold, units)


def lambda_t(truth: Field, est: Field, threshold: float = 1.0) -> SpectralResult:
    """Effective temporal resolution in days."""
    _check_aligned(truth, est)
    return _resolution(truth.values, est.values, 0, truth.spec.dt, threshold, "days")


# --------------------------------------------------------------------------- currents and tracks


def current_rmse(truth_vel: VelocityField, est_ssh: Field, consts: PhysConsts = DEFAULT_CONSTS,
                 region=None) -> tuple[float, float]:
    _check_aligned(truth_vel.u, est_ssh)
    est = geostrophic_currents(est_ssh, consts)
    mask = _region_mask(est_ssh.spec, region)
    du = (est.u.values - truth_vel.u.values)[:, mask]
    dv = (est.v.values - truth_vel.v.values)[:, mask]
    return float(np.sqrt(np.mean(du**2))), float(np.sqrt(np.mean(dv**2)))


def along_track_rmse(held_out: TrackSet, est: Field) -> float:
    if len(held_out) == 0:
        raise ValueError("no held-out samples")
    r = sample_trilinear(est, held_out) - held_out.value
    return float(np.sqrt(np.mean(r**2)))


# --------------------------------------------------------------------------- window profile


@dataclass(frozen=True)
class WindowProfile:
    offsets: np.ndarray
    rmse: np.ndarray  # NaN where an offset is missing
    gaps: list[int]
    delay_days: np.ndarray  # future days available to each offset; 0 is the causal end

    @property
    def argmin(self) -> int | None:
        if np.all(np.isnan(self.rmse)):
            return None
        return int(self.offsets[np.nanargmin(self.rmse)])


def window_profile(truth: Field, recon, starts, window_len: int | None = None) -> WindowProfile:
    """RMSE of each in-window position over all windows.

    ``recon`` is either an array (n_windows, window_len, lat, lon) or a mapping
    offset -> array (n_windows, lat, lon); absent or all-NaN offsets are reported as gaps.
    """
    starts = np.asarray(starts, dtype=np.int64)
    if isinstance(recon, Mapping):
        per = {int(o): np.asarray(a, dtype=np.float64) for o, a in recon.items()}
        if window_len is None:
            window_len = max(per) + 1 if per else 0
    else:
        arr = np.asarray(recon, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[0] != starts.size:
            raise ValueError("recon must be (n_windows, window_len, lat, lon)")
        window_len = arr.shape[1] if window_len is None else window_len
        per = {o: arr[:, o] for o in range(arr.shape[1])}
    offsets = np.arange(window_len)
    rmse = np.full(window_len, np.nan)
    for o, a in per.items():
        if not 0 <= o < window_len:
            raise ValueError(f"offset {o} outside the window")
        if a.shape != (starts.size, truth.spec.nlat, truth.spec.nlon):
            raise ValueError(f"offset {o}: expected one slice per window")
        days = starts + o
        if days.max(initial=-1) >= truth.spec.nt:
            raise ValueError("window extends past the truth record")
        err = a - truth.values[days]
        ok = ~np.isnan(err)
        if ok.any():
            rmse[o] = float(np.sqrt(np.mean(err[ok] ** 2)))
    gaps = [int(o) for o in offsets if np.isnan(rmse[o])]
    return WindowProfile(offsets, rmse, gaps, window_len - 1 - offsets)


# --------------------------------------------------------------------------- report


@dataclass
class EvalReport:
    mu: float | None = None
    sigma_t: float | None = None
    lambda_x: float | None = None
    lambda_x_units: str = "deg"
    lambda_x_at_bound: bool | None = None
    lambda_t: float | None = None
    lambda_t_at_bound: bool | None = None
    lambda_threshold: float = 1.0
    mu_u: float | None = None
    mu_v: float | None = None
    along_track_rmse: float | None = None
    daily_rmse: list[float] = field(default_factory=list)
    detection: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_daily_csv(self, path, times=None) -> None:
        times = range(len(self.daily_rmse)) if times is None else times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "rmse"])
            for t, r in zip(times, self.daily_rmse):
                w.writerow([repr(float(t)), repr(float(r))])


def evaluate_fields(truth: Field, est: Field, truth_vel: VelocityField | None = None, held_out: TrackSet | None = None,
                    region=None, threshold: float = 1.0, units: str = "deg",
                    consts: PhysConsts = DEFAULT_CONSTS) -> EvalReport:
    """Gridded metric suite; spectral terms are skipped when the record is too short."""
    rs = rmse_suite(truth, est, region)
    rep = EvalReport(mu=rs.mu, sigma_t=rs.sigma_t, daily_rmse=[float(x) for x in rs.daily],
                     lambda_threshold=threshold, lambda_x_units=units)
    if truth.spec.nlon >= MIN_SPECTRAL_SAMPLES:
        lx = lambda_x(truth, est, threshold, units)
        rep.lambda_x, rep.lambda_x_at_bound = lx.wavelength, lx.at_bound
    if truth.spec.nt >= MIN_SPECTRAL_SAMPLES:
        lt = lambda_t(truth, est, threshold)
        rep.lambda_t, rep.lambda_t_at_bound = lt.wavelength, lt.at_bound
    if truth_vel is not None:
        rep.mu_u, rep.mu_v = current_rmse(truth_vel, est, consts, region)
    if held_out is not None and len(held_out):
        rep.along_track_rmse = along_track_rmse(held_out, est)
    return rep
