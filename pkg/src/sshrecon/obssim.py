"""Observation operators: along-track SSH sampling and cloud-degraded SST.

Also holds the support helpers used to build an observing system at desk scale
(inclined-track generator, desynchronisation, daily rasterisation) and SST
deseasonalisation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .gridcore import Field, GridError, GridSpec, TrackSet, bilinear_slice, regrid_bilinear, sample_trilinear

KM_PER_DEG = 6371.0 * math.pi / 180.0


@dataclass(frozen=True)
class SshObsParams:
    sigma_noise: float = 0.019  # m
    seed: int = 0

    def __post_init__(self):
        if self.sigma_noise < 0:
            raise ValueError("sigma_noise must be >= 0")


@dataclass(frozen=True)
class SstObsParams:
    sigma_t: float = 1.23  # days
    sigma_x: float = 16.0  # km
    noise_coarse_n: int = 32
    noise_sigma: float = 0.35  # degC, tunable; see README
    cloud_smooth_km: float = 43.0
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_t, self.sigma_x, self.cloud_smooth_km) <= 0 or self.noise_coarse_n < 2:
            raise ValueError("SST operator parameters must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# --------------------------------------------------------------------------- SSH


def simulate_ssh_obs(truth_ssh: Field, support: TrackSet, p: SshObsParams = SshObsParams()) -> TrackSet:
    if len(support) == 0:
        return TrackSet.empty()
    clean = sample_trilinear(truth_ssh, support)
    rng = np.random.default_rng(p.seed)
    noise = rng.normal(0.0, p.sigma_noise, clean.size) if p.sigma_noise > 0 else 0.0
    return support.with_values(clean + noise)


def shift_support(support: TrackSet, delay: float, t0: float, length: float) -> TrackSet:
    """Delay every sample and wrap it back into ``[t0, t0 + length)``."""
    if delay == 0:
        return support
    t = np.mod(support.t - t0 + delay, length) + t0
    return support.with_times(t)


def rasterize_tracks(obs: TrackSet, spec: GridSpec) -> tuple[Field, Field]:
    """Daily pixel means of the samples; empty pixels hold zero."""
    if spec.dt != 1.0:
        raise GridError("rasterisation needs a daily grid (dt = 1)")
    total = np.zeros(spec.size)
    count = np.zeros(spec.size)
    if len(obs):
        k = np.floor((obs.t - spec.t0) / spec.dt + 0.5).astype(np.int64)
        i = np.floor((spec.lat0 - obs.lat) / spec.dlat + 0.5).astype(np.int64)
        j = np.floor((obs.lon - spec.lon0) / spec.dlon + 0.5).astype(np.int64)
        ok = (k >= 0) & (k < spec.nt) & (i >= 0) & (i < spec.nlat) & (j >= 0) & (j < spec.nlon)
        flat = (k * spec.nlat + i) * spec.nlon + j
        total = np.bincount(flat[ok], weights=obs.value[ok], minlength=spec.size)
        count = np.bincount(flat[ok], minlength=spec.size).astype(np.float64)
    mean = np.divide(total, count, out=np.zeros(spec.size), where=count > 0)
    return Field(spec, mean, "m"), Field(spec, count, "dimensionless")


def inclined_tracks(
    spec: GridSpec,
    n_sat: int = 3,
    passes_per_day: int = 1,
    inclination_deg: float = 20.0,
    ground_speed_km_s: float = 6.5,
    sample_interval_s: float = 1.0,
    seed: int = 0,
) -> TrackSet:
    """Straight ground tracks crossing the box, one sample per ``sample_interval_s``.

    Each satellite's crossing longitude advances by an irrational fraction of the
    box width per pass so that coverage fills in over a few weeks. Passes
    alternate ascending and descending; ``inclination_deg`` is the heading
    measured from north.
    """
    rng = np.random.default_rng(seed)
    lat_c = spec.lat_center
    coslat = math.cos(math.radians(lat_c))
    half_h = 0.5 * (spec.lat0 - spec.lat_min) * KM_PER_DEG
    half_w = 0.5 * (spec.lon_max - spec.lon0) * KM_PER_DEG * coslat
    length = 2.2 * math.hypot(half_h, half_w)
    step = ground_speed_km_s * sample_interval_s
    s = np.arange(-0.5 * length, 0.5 * length, step)
    golden = (math.sqrt(5) - 1) / 2
    phase = rng.uniform(0, 1, n_sat)
    day_sec = rng.uniform(2 * 3600, 20 * 3600, (n_sat, passes_per_day))
    cols = {k: [] for k in ("sat", "t", "sec", "lat", "lon")}
    first_day = math.floor(spec.t0)
    last_day = math.floor(spec.t_max)
    n_pass = 0
    for day in range(first_day, last_day + 1):
        for sat in range(n_sat):
            for p in range(passes_per_day):
                n_pass_sat = (day - first_day) * passes_per_day + p
                frac = (phase[sat] + n_pass_sat * golden * 0.5 + sat / max(n_sat, 1)) % 1.0
                x0 = (frac - 0.5) * 2 * half_w
                heading = math.radians(inclination_deg) * (1 if n_pass_sat % 2 == 0 else -1)
                x = x0 + s * math.sin(heading)
                y = s * math.cos(heading)
                lat = lat_c + y / KM_PER_DEG
                lon = spec.lon_center + x / (KM_PER_DEG * np.cos(np.deg2rad(lat)))
                inside = (lat >= spec.lat_min) & (lat <= spec.lat0) & (lon >= spec.lon0) & (lon <= spec.lon_max)
                if not inside.any():
                    continue
                sec = day_sec[sat, p] + np.arange(s.size) * sample_interval_s
                cols["sat"].append(np.full(inside.sum(), sat))
                cols["t"].append(day + sec[inside] / 86400.0)
                cols["sec"].append(sec[inside])
                cols["lat"].append(lat[inside])
                cols["lon"].append(lon[inside])
                n_pass += 1
    if not n_pass:
        return TrackSet.empty()
    cat = {k: np.concatenate(v) for k, v in cols.items()}
    ok = (cat["t"] >= spec.t0 - 0.5 * spec.dt) & (cat["t"] <= spec.t_max + 0.5 * spec.dt)
    return TrackSet(cat["sat"][ok], cat["t"][ok], cat["sec"][ok], cat["lat"][ok], cat["lon"][ok], np.zeros(ok.sum()))


# --------------------------------------------------------------------------- clouds and SST


def _check_cloud(values: np.ndarray) -> None:
    if np.any(~np.isfinite(values)) or values.min() < 0 or values.max() > 1:
        raise ValueError("cloud cover must lie in [0, 1]")


def box_kernel_size(spec: GridSpec, width_km: float) -> tuple[int, int]:
    """Odd (lat, lon) kernel widths closest to ``width_km``."""
    dy_km, dx_km = spec.pixel_km()
    sizes = []
    for px in (dy_km, dx_km):
        k = max(1, int(round(width_km / px)))
        sizes.append(k if k % 2 else k + 1)
    return sizes[0], sizes[1]


def prepare_cloud_cover(raw: Field, spec: GridSpec, smooth_km: float = 43.0) -> Field:
    """Regrid a raw cloud record to ``spec``, tile it in time and box-average it spatially."""
    _check_cloud(raw.values)
    src = raw.spec
    if not src.same_space(spec):
        raw = regrid_bilinear(raw, spec.with_time(src.t0, src.dt, src.nt))
    reps = np.arange(spec.nt) % src.nt
    tiled = raw.values[reps]
    ky, kx = box_kernel_size(spec, smooth_km)
    smooth = ndimage.uniform_filter(tiled, size=(1, ky, kx), mode="mirror")
    return Field(spec, np.clip(smooth, 0.0, 1.0), "dimensionless")


def synthetic_cloud_cover(spec: GridSpec, seed: int = 0, cloud_fraction: float = 0.5, scale_km: float = 80.0) -> Field:
    """Binary cloud masks from thresholded smooth noise, for runs without a real cloud record."""
    rng = np.random.default_rng(seed)
    dy_km, dx_km = spec.pixel_km()
    noise = rng.standard_normal(spec.shape)
    smooth = ndimage.gaussian_filter(noise, sigma=(1.0, scale_km / dy_km, scale_km / dx_km), mode="wrap")
    thr = np.quantile(smooth, 1 - cloud_fraction)
    return Field(spec, (smooth > thr).astype(np.float64), "dimensionless")


def coarse_noise(spec: GridSpec, n: int, sigma: float, seed: int) -> np.ndarray:
    """White noise on an ``n x n`` grid per day, bilinearly upsampled to the full grid."""
    rng = np.random.default_rng(seed)
    coarse = rng.normal(0.0, 1.0, (spec.nt, n, n)) * sigma
    rows = np.linspace(0, n - 1, spec.nlat)
    cols = np.linspace(0, n - 1, spec.nlon)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([bilinear_slice(coarse[k], rr, cc) for k in range(spec.nt)])


def gaussian_space_time_blur(values: np.ndarray, spec: GridSpec, sigma_t_days: float, sigma_x_km: float) -> np.ndarray:
    """Separable Gaussian: clamped edges in time, mirrored edges in space, 4-sigma truncation."""
    dy_km, dx_km = spec.pixel_km()
    out = ndimage.gaussian_filter1d(values, sigma_t_days / spec.dt, axis=0, mode="nearest", truncate=4.0)
    out = ndimage.gaussian_filter1d(out, sigma_x_km / dy_km, axis=1, mode="mirror", truncate=4.0)
    out = ndimage.gaussian_filter1d(out, sigma_x_km / dx_km, axis=2, mode="mirror", truncate=4.0)
    return out


def simulate_sst_obs(truth_sst: Field, cloud: Field, p: SstObsParams = SstObsParams()) -> Field:
    """``(1 - C) * (X + eps) + C * G * (X + eps)`` with one noise draw feeding both branches."""
    if cloud.spec.shape != truth_sst.spec.shape:
        raise GridError("cloud cover and SST grids differ")
    _check_cloud(cloud.values)
    spec = truth_sst.spec
    noisy = truth_sst.values
    if p.noise_sigma > 0:
        noisy = noisy + coarse_noise(spec, p.noise_coarse_n, p.noise_sigma, p.seed)
    blurred = gaussian_space_time_blur(noisy, spec, p.sigma_t, p.sigma_x)
    C = cloud.values
    return Field(spec, (1 - C) * noisy + C * blurred, truth_sst.units)


def _slot(times: np.ndarray, dt: float, period: float) -> np.ndarray:
    n_slots = int(round(period / dt))
    if n_slots < 1 or abs(n_slots * dt - period) > 1e-9 * period:
        raise ValueError("period must be a whole number of time steps")
    return np.mod(np.rint(times / dt).astype(np.int64), n_slots)


def build_climatology(sst: Field, period: float = 365.0) -> Field:
    """Mean image for every day of the cycle; slot ``d`` collects slices with ``t mod period == d``."""
    spec = sst.spec
    if spec.nt * spec.dt < period - 1e-9:
        raise ValueError("record shorter than one period")
    slots = _slot(spec.times, spec.dt, period)
    n_slots = int(round(period / spec.dt))
    clim = np.zeros((n_slots, spec.nlat, spec.nlon))
    counts = np.bincount(slots, minlength=n_slots)
    for k, s in enumerate(slots):
        clim[s] += sst.values[k]
    clim /= counts[:, None, None]
    return Field(spec.with_time(0.0, spec.dt, n_slots), clim, sst.units)


def deseasonalize(sst: Field, clim: Field) -> Field:
    spec = sst.spec
    if not spec.same_space(clim.spec) or clim.spec.dt != spec.dt:
        raise GridError("climatology grid does not match the SST grid")
    slots = _slot(spec.times, spec.dt, clim.spec.nt * clim.spec.dt)
    return Field(spec, sst.values - clim.values[slots], sst.units)
