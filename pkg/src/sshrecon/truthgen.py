"""Synthetic ocean truth: drifting Gaussian eddies on a sloping background, with an
SST tracer advected by the geostrophic currents of that SSH.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DEFAULT_CONSTS, PhysConsts, VelocityField, geostrophic_currents
from .gridcore import M_PER_DEG, Field, GridError, GridSpec, bilinear_slice, read_field, write_field

KM_PER_DEG = M_PER_DEG / 1e3
SECONDS_PER_DAY = 86400.0

GULF_STREAM_BOX = (33.0, 43.0, -65.0, -55.0)


def gulf_stream_spec(n: int = 128, nt: int = 30, t0: float = 0.5) -> GridSpec:
    """The 33-43N, 65-55W box; daily snapshots sit at mid-day (``t0 = 0.5``)."""
    return GridSpec.from_box(*GULF_STREAM_BOX, n, n, t0=t0, dt=1.0, nt=nt)


@dataclass(frozen=True)
class TruthConfig:
    spec: GridSpec = field(default_factory=gulf_stream_spec)
    n_eddies: int = 8
    radius_range: tuple[float, float] = (40.0, 80.0)  # km
    amplitude_range: tuple[float, float] = (0.10, 0.35)  # m, sign drawn separately
    drift_speed_range: tuple[float, float] = (1.0, 4.0)  # km/day
    background_gradient: float = 0.05  # m/degree, SSH rising northward when positive
    sst_contrast: float = 8.0  # degC across the domain
    seed: int = 0
    min_separation: float = 0.0  # in units of (R_i + R_j); 0 disables the check
    sst_mean: float = 20.0
    separate_over_record: bool = False  # apply min_separation at every frame, not only the first

    def __post_init__(self):
        for name in ("radius_range", "amplitude_range", "drift_speed_range"):
            lo, hi = getattr(self, name)
            if not (lo > 0 or (name == "drift_speed_range" and lo >= 0)) or hi < lo:
                raise ValueError(f"{name} must have positive, ordered endpoints")
        if self.n_eddies < 0:
            raise ValueError("n_eddies must be >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["spec"] = self.spec.to_dict()
        for k in ("radius_range", "amplitude_range", "drift_speed_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TruthConfig:
        d = dict(d)
        if "spec" in d:
            d["spec"] = GridSpec.from_dict(d["spec"])
        for k in ("radius_range", "amplitude_range", "drift_speed_range"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown truth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EddySeed:
    lat: float
    lon: float
    radius_km: float
    amplitude: float
    drift_east_km: float  # km/day
    drift_north_km: float

    def position(self, t_rel: float) -> tuple[float, float]:
        lat = self.lat + self.drift_north_km * t_rel / KM_PER_DEG
        lon = self.lon + self.drift_east_km * t_rel / (KM_PER_DEG * math.cos(math.radians(lat)))
        return lat, lon


def eddy_catalog(cfg: TruthConfig) -> list[EddySeed]:
    """Draw the eddy population; deterministic for a given seed."""
    spec = cfg.spec
    rng = np.random.default_rng(cfg.seed)
    dy_km, dx_km = spec.pixel_km()
    if 2 * cfg.radius_range[0] / max(dy_km, dx_km) < 4:
        raise GridError("grid too coarse: smallest eddy spans fewer than 4 pixels")
    check_times = spec.times - spec.t0 if cfg.separate_over_record else [0.0]
    eddies: list[EddySeed] = []
    attempts = 0
    while len(eddies) < cfg.n_eddies:
        attempts += 1
        if attempts > 10000:
            raise GridError("could not place eddies with the requested separation")
        r = rng.uniform(*cfg.radius_range)
        margin_lat = 1.5 * r / KM_PER_DEG
        margin_lon = 1.5 * r / (KM_PER_DEG * math.cos(math.radians(spec.lat_center)))
        lat = rng.uniform(spec.lat_min + margin_lat, spec.lat0 - margin_lat)
        lon = rng.uniform(spec.lon0 + margin_lon, spec.lon_max - margin_lon)
        amp = rng.uniform(*cfg.amplitude_range) * rng.choice((-1.0, 1.0))
        speed = rng.uniform(*cfg.drift_speed_range)
        heading = rng.uniform(0, 2 * np.pi)
        cand = EddySeed(lat, lon, r, amp, speed * math.cos(heading), speed * math.sin(heading))
        if cfg.min_separation > 0 and any(
            _distance_km(*cand.position(tt), *e.position(tt)) < cfg.min_separation * (cand.radius_km + e.radius_km)
            for e in eddies for tt in check_times
        ):
            continue
        eddies.append(cand)
    return eddies


def _distance_km(lat1, lon1, lat2, lon2) -> float:
    x = (lon2 - lon1) * KM_PER_DEG * math.cos(math.radians(0.5 * (lat1 + lat2)))
    y = (lat2 - lat1) * KM_PER_DEG
    return math.hypot(x, y)


def gaussian_bump(spec: GridSpec, lat_c: float, lon_c: float, radius_km: float, amplitude: float) -> np.ndarray:
    """``A exp(-r^2 / 2R^2)`` with r measured with the per-row zonal scale."""
    lats = spec.lats[:, None]
    x = (spec.lons[None, :] - lon_c) * KM_PER_DEG * np.cos(np.deg2rad(lats))
    y = (lats - lat_c) * KM_PER_DEG
    return amplitude * np.exp(-(x**2 + y**2) / (2 * radius_km**2))


def synthetic_ssh(cfg: TruthConfig, eddies: list[EddySeed] | None = None) -> Field:
    spec = cfg.spec
    eddies = eddy_catalog(cfg) if eddies is None else eddies
    plane = cfg.background_gradient * (spec.lats - spec.lat_center)[:, None] * np.ones(spec.nlon)
    ssh = np.empty(spec.shape)
    for k, t in enumerate(spec.times):
        h = plane.copy()
        for e in eddies:
            lat, lon = e.position(t - spec.t0)
            h += gaussian_bump(spec, lat, lon, e.radius_km, e.amplitude)
        ssh[k] = h
    return Field(spec, ssh, "m")


def initial_sst(cfg: TruthConfig, eddies: list[EddySeed]) -> np.ndarray:
    spec = cfg.spec
    half_span = max(0.5 * (spec.lat0 - spec.lat_min), spec.dlat)
    y = (spec.lats - spec.lat_center) / half_span
    profile = cfg.sst_mean - 0.5 * cfg.sst_contrast * np.tanh(1.5 * y)
    sst = profile[:, None] * np.ones(spec.nlon)
    # warm-core anticyclones, cold-core cyclones
    for e in eddies:
        sst += gaussian_bump(spec, e.lat, e.lon, e.radius_km, 0.1 * cfg.sst_contrast * np.sign(e.amplitude))
    return sst


def _pixel_velocity(u: np.ndarray, v: np.ndarray, spec: GridSpec, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Displacement over ``dt`` days in (row, col) pixel units."""
    dx = spec.dlon * M_PER_DEG * np.cos(np.deg2rad(spec.lats))[:, None]
    dy = spec.dlat * M_PER_DEG
    dcol = u * SECONDS_PER_DAY * dt / dx
    drow = -v * SECONDS_PER_DAY * dt / dy
    return drow, dcol


def advect_tracer(tracer: np.ndarray, u: np.ndarray, v: np.ndarray, dt: float, spec: GridSpec) -> np.ndarray:
    """Semi-Lagrangian step of ``dT/dt + w.grad T = 0`` with midpoint backtrace and bilinear lookup."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tracer = np.asarray(tracer, dtype=np.float64)
    drow, dcol = _pixel_velocity(np.asarray(u), np.asarray(v), spec, dt)
    n_sub = max(1, int(math.ceil(max(np.abs(drow).max(), np.abs(dcol).max()) - 1e-12)))
    drow, dcol = drow / n_sub, dcol / n_sub
    rows, cols = np.meshgrid(np.arange(spec.nlat, dtype=float), np.arange(spec.nlon, dtype=float), indexing="ij")
    lo, hi = tracer.min(), tracer.max()
    out = tracer
    for _ in range(n_sub):
        r_mid = rows - 0.5 * drow
        c_mid = cols - 0.5 * dcol
        r_dep = rows - bilinear_slice(drow, r_mid, c_mid)
        c_dep = cols - bilinear_slice(dcol, r_mid, c_mid)
        out = bilinear_slice(out, r_dep, c_dep)
    # bilinear weights are convex; the clip only removes last-ulp rounding excursions
    return np.clip(out, lo, hi)


def generate_truth(cfg: TruthConfig, consts: PhysConsts = DEFAULT_CONSTS) -> tuple[Field, Field, VelocityField]:
    eddies = eddy_catalog(cfg)
    ssh = synthetic_ssh(cfg, eddies)
    cur = geostrophic_currents(ssh, consts)
    spec = cfg.spec
    sst = np.empty(spec.shape)
    sst[0] = initial_sst(cfg, eddies)
    for k in range(1, spec.nt):
        sst[k] = advect_tracer(sst[k - 1], cur.u.values[k - 1], cur.v.values[k - 1], spec.dt, spec)
    return ssh, Field(spec, sst, "degC"), cur


_TRUTH_FILES = {"ssh": "m", "sst": "degC", "u": "m/s", "v": "m/s"}


def write_truth(path: str | os.PathLike, ssh: Field, sst: Field, currents: VelocityField) -> list[Path]:
    path = Path(path)
    out = []
    for name, f in (("ssh", ssh), ("sst", sst), ("u", currents.u), ("v", currents.v)):
        write_field(path / name, f)
        out += [path / f"{name}.f64", path / f"{name}.json"]
    return out


def read_truth(path: str | os.PathLike) -> tuple[Field, Field, VelocityField]:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"truth directory {path} not found")
    fields = {}
    for name, units in _TRUTH_FILES.items():
        f = read_field(path / name)
        if f.units != units:
            raise GridError(f"{name}: expected units {units}, sidecar says {f.units}")
        fields[name] = f
    spec = fields["ssh"].spec
    for name, f in fields.items():
        if f.spec != spec:
            raise GridError(f"grid of {name} does not match ssh")
    return fields["ssh"], fields["sst"], VelocityField(fields["u"], fields["v"])


__all__ = [
    "EddySeed",
    "TruthConfig",
    "advect_tracer",
    "eddy_catalog",
    "gaussian_bump",
    "generate_truth",
    "gulf_stream_spec",
    "read_truth",
    "synthetic_ssh",
    "write_truth",
]
