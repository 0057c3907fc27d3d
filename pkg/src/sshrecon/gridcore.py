"""Grid geometry, field containers, track sets and the trilinear sampling operator.

Layout convention: arrays are ``(time, lat, lon)`` with row 0 the northernmost
latitude. ``GridSpec.lat0`` is the latitude of row 0, so row ``i`` sits at
``lat0 - i * dlat``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

EARTH_RADIUS_M = 6371.0e3
M_PER_DEG = EARTH_RADIUS_M * np.pi / 180.0

UNITS = ("m", "degC", "dimensionless", "m/s", "1/s")


class GridError(ValueError):
    pass


class MaskedSupportError(GridError):
    pass


@dataclass(frozen=True)
class GridSpec:
    lat0: float
    lon0: float
    dlat: float
    dlon: float
    nlat: int
    nlon: int
    t0: float = 0.0
    dt: float = 1.0
    nt: int = 1

    def __post_init__(self):
        if not (self.dlat > 0 and self.dlon > 0 and self.dt > 0):
            raise GridError("grid spacings must be positive")
        if min(self.nlat, self.nlon, self.nt) < 1:
            raise GridError("grid sizes must be >= 1")
        south = self.lat0 - (self.nlat - 1) * self.dlat
        if not (-90.0 < south and self.lat0 < 90.0):
            raise GridError("latitude range must stay within (-90, 90)")

    @classmethod
    def from_box(cls, lat_min, lat_max, lon_min, lon_max, nlat, nlon, t0=0.0, dt=1.0, nt=1):
        """Pixel-centred grid covering the box edges ``[lat_min, lat_max] x [lon_min, lon_max]``."""
        dlat = (lat_max - lat_min) / nlat
        dlon = (lon_max - lon_min) / nlon
        return cls(lat_max - dlat / 2, lon_min + dlon / 2, dlat, dlon, nlat, nlon, t0, dt, nt)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nt, self.nlat, self.nlon)

    @property
    def size(self) -> int:
        return self.nt * self.nlat * self.nlon

    @property
    def lats(self) -> np.ndarray:
        return self.lat0 - self.dlat * np.arange(self.nlat)

    @property
    def lons(self) -> np.ndarray:
        return self.lon0 + self.dlon * np.arange(self.nlon)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.nt)

    @property
    def lat_center(self) -> float:
        return self.lat0 - 0.5 * (self.nlat - 1) * self.dlat

    @property
    def lon_center(self) -> float:
        return self.lon0 + 0.5 * (self.nlon - 1) * self.dlon

    @property
    def lat_min(self) -> float:
        return self.lat0 - (self.nlat - 1) * self.dlat

    @property
    def lon_max(self) -> float:
        return self.lon0 + (self.nlon - 1) * self.dlon

    @property
    def t_max(self) -> float:
        return self.t0 + (self.nt - 1) * self.dt

    def pixel_km(self) -> tuple[float, float]:
        """Meridional and zonal pixel size in km at the domain centre."""
        dy = self.dlat * M_PER_DEG / 1e3
        dx = self.dlon * M_PER_DEG * np.cos(np.deg2rad(self.lat_center)) / 1e3
        return dy, float(dx)

    def with_time(self, t0: float, dt: float, nt: int) -> GridSpec:
        return GridSpec(self.lat0, self.lon0, self.dlat, self.dlon, self.nlat, self.nlon, t0, dt, nt)

    def same_space(self, other: GridSpec, rtol: float = 1e-12) -> bool:
        a = np.array([self.lat0, self.lon0, self.dlat, self.dlon])
        b = np.array([other.lat0, other.lon0, other.dlat, other.dlon])
        return (self.nlat, self.nlon) == (other.nlat, other.nlon) and np.allclose(a, b, rtol=rtol, atol=1e-12)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> GridSpec:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class Field:
    spec: GridSpec
    values: np.ndarray
    units: str = "m"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.size != self.spec.size:
            raise GridError(f"values size {v.size} does not match grid {self.spec.shape}")
        v = v.reshape(self.spec.shape).view()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        if self.units not in UNITS:
            raise GridError(f"unknown units tag {self.units!r}")

    def replace(self, values: np.ndarray, units: str | None = None) -> Field:
        return Field(self.spec, values, self.units if units is None else units)

    def time_slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def subset_time(self, start: int, stop: int) -> Field:
        s = self.spec
        return Field(s.with_time(s.t0 + start * s.dt, s.dt, stop - start), self.values[start:stop], self.units)


class PointSample(NamedTuple):
    t: float
    lat: float
    lon: float
    value: float
    sat_id: int
    seconds_of_day: float


_TRACK_COLUMNS = ("sat_id", "t", "seconds_of_day", "lat", "lon", "value")


@dataclass(frozen=True)
class TrackSet:
    """Along-track point samples held as parallel columns, sorted by (sat_id, t, seconds_of_day)."""

    sat_id: np.ndarray
    t: np.ndarray
    seconds_of_day: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        cols = {}
        n = None
        for name in _TRACK_COLUMNS:
            dtype = np.int64 if name == "sat_id" else np.float64
            a = np.atleast_1d(np.asarray(getattr(self, name), dtype=dtype)).ravel()
            if n is None:
                n = a.size
            elif a.size != n:
                raise GridError("track columns must have equal length")
            cols[name] = a
        if n and np.any(np.abs(cols["lat"]) >= 90):
            raise GridError("latitudes must lie in (-90, 90)")
        if n and np.any(cols["sat_id"] < 0):
            raise GridError("sat_id must be non-negative")
        order = np.lexsort((cols["seconds_of_day"], cols["t"], cols["sat_id"]))
        for name, a in cols.items():
            a = a[order]
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    @classmethod
    def empty(cls) -> TrackSet:
        z = np.zeros(0)
        return cls(z.astype(np.int64), z, z, z, z, z)

    @classmethod
    def from_samples(cls, samples) -> TrackSet:
        samples = list(samples)
        if not samples:
            return cls.empty()
        arr = np.array([(s.sat_id, s.t, s.seconds_of_day, s.lat, s.lon, s.value) for s in samples])
        return cls(*(arr[:, i] for i in range(6)))

    def __len__(self) -> int:
        return self.t.size

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> PointSample:
        return PointSample(self.t[i], self.lat[i], self.lon[i], self.value[i], int(self.sat_id[i]), self.seconds_of_day[i])

    def select(self, mask: np.ndarray) -> TrackSet:
        return TrackSet(*(getattr(self, c)[mask] for c in _TRACK_COLUMNS))

    def with_values(self, values: np.ndarray) -> TrackSet:
        return TrackSet(self.sat_id, self.t, self.seconds_of_day, self.lat, self.lon, values)

    def with_times(self, t: np.ndarray) -> TrackSet:
        return TrackSet(self.sat_id, t, self.seconds_of_day, self.lat, self.lon, self.value)

    @property
    def satellites(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.sat_id))

    def in_time(self, t_lo: float, t_hi: float) -> TrackSet:
        return self.select((self.t >= t_lo) & (self.t <= t_hi))

    @staticmethod
    def concat(*sets: TrackSet) -> TrackSet:
        return TrackSet(*(np.concatenate([getattr(s, c) for s in sets]) for c in _TRACK_COLUMNS))

    def equals(self, other: TrackSet) -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, c), getattr(other, c)) for c in _TRACK_COLUMNS
        )


# --------------------------------------------------------------------------- sampling


@dataclass(frozen=True)
class TrilinearStencil:
    """Flat corner indices and weights of the trilinear operator for a fixed support."""

    spec: GridSpec
    index: np.ndarray  # (n, 8) flat indices into the (nt, nlat, nlon) array
    weight: np.ndarray  # (n, 8)

    @property
    def n(self) -> int:
        return self.index.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        if self.n == 0:
            return np.zeros(0)
        out = np.einsum("ij,ij->i", flat[self.index], self.weight)
        return out

    def adjoint(self, residuals: np.ndarray) -> np.ndarray:
        r = np.asarray(residuals, dtype=np.float64).ravel()
        if r.size != self.n:
            raise GridError(f"{r.size} residuals for {self.n} support points")
        if self.n == 0:
            return np.zeros(self.spec.shape)
        acc = np.bincount(self.index.ravel(), weights=(self.weight * r[:, None]).ravel(), minlength=self.spec.size)
        return acc.reshape(self.spec.shape)


def _axis_weights(frac: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lower index, upper index and upper weight along one axis, clamped to ``[0, n-1]``."""
    frac = np.clip(frac, 0.0, n - 1)
    # snap coordinates that sit on a node up to rounding
    near = np.rint(frac)
    frac = np.where(np.abs(frac - near) < 1e-9, near, frac)
    i0 = np.floor(frac).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, frac - i0


def build_stencil(spec: GridSpec, t, lat, lon) -> TrilinearStencil:
    """Trilinear weights of the given points; spatial coordinates are clamped to the box."""
    t = np.asarray(t, dtype=np.float64).ravel()
    lat = np.asarray(lat, dtype=np.float64).ravel()
    lon = np.asarray(lon, dtype=np.float64).ravel()
    ft = (t - spec.t0) / spec.dt
    bad = (ft < -1.0) | (ft > spec.nt)
    if np.any(bad):
        raise GridError(f"{int(bad.sum())} support points lie more than dt outside the time range")
    k0, k1, wt = _axis_weights(ft, spec.nt)
    i0, i1, wy = _axis_weights((spec.lat0 - lat) / spec.dlat, spec.nlat)
    j0, j1, wx = _axis_weights((lon - spec.lon0) / spec.dlon, spec.nlon)
    sk, si = spec.nlat * spec.nlon, spec.nlon
    index = np.empty((t.size, 8), dtype=np.int64)
    weight = np.empty((t.size, 8))
    c = 0
    for k, fa in ((k0, 1 - wt), (k1, wt)):
        for i, fb in ((i0, 1 - wy), (i1, wy)):
            for j, fe in ((j0, 1 - wx), (j1, wx)):
                index[:, c] = k * sk + i * si + j
                weight[:, c] = fa * fb * fe
                c += 1
    return TrilinearStencil(spec, index, weight)


def stencil_for(points: TrackSet, spec: GridSpec) -> TrilinearStencil:
    return build_stencil(spec, points.t, points.lat, points.lon)


def sample_trilinear(field: Field, points: TrackSet) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0)
    out = stencil_for(points, field.spec).apply(field.values)
    if np.any(np.isnan(out)):
        raise MaskedSupportError("masked cell under support")
    return out


def scatter_adjoint(points: TrackSet, residuals, spec: GridSpec, units: str = "m") -> Field:
    residuals = np.asarray(residuals, dtype=np.float64).ravel()
    if residuals.size != len(points):
        raise GridError(f"{residuals.size} residuals for {len(points)} points")
    if len(points) == 0:
        return Field(spec, np.zeros(spec.shape), units)
    return Field(spec, stencil_for(points, spec).adjoint(residuals), units)


# --------------------------------------------------------------------------- regridding


def bilinear_slice(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a 2-D array at fractional (row, col) positions, clamped to the edges."""
    ny, nx = img.shape
    i0, i1, fy = _axis_weights(np.asarray(rows, dtype=np.float64), ny)
    j0, j1, fx = _axis_weights(np.asarray(cols, dtype=np.float64), nx)
    top = img[i0, j0] + fx * (img[i0, j1] - img[i0, j0])
    bot = img[i1, j0] + fx * (img[i1, j1] - img[i1, j0])
    return top + fy * (bot - top)


def regrid_bilinear(field: Field, target: GridSpec) -> Field:
    src = field.spec
    if (target.nt, target.t0, target.dt) != (src.nt, src.t0, src.dt):
        raise GridError("spatial regrid requires identical time axes")
    if target == src:
        return Field(target, field.values.copy(), field.units)
    eps = 1e-9 * max(src.dlat, src.dlon)
    if (
        target.lat0 > src.lat0 + eps
        or target.lat_min < src.lat_min - eps
        or target.lon0 < src.lon0 - eps
        or target.lon_max > src.lon_max + eps
    ):
        raise GridError("extrapolation not supported")
    rows = (src.lat0 - target.lats) / src.dlat
    cols = (target.lons - src.lon0) / src.dlon
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.stack([bilinear_slice(field.values[k], rr, cc) for k in range(src.nt)])
    return Field(target, out, field.units)


# --------------------------------------------------------------------------- containers


def write_field(path: str | os.PathLike, field: Field, missing: float | None = None) -> None:
    """Write ``<path>.f64`` (little-endian float64, time-major) and a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vals = np.array(field.values, dtype="<f8")
    if missing is not None:
        vals = np.where(np.isnan(vals), missing, vals)
    vals.tofile(path.with_suffix(".f64"))
    meta = {"grid": field.spec.to_dict(), "units": field.units, "missing_value": missing, "layout": "t,lat(north-up),lon"}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_field(path: str | os.PathLike) -> Field:
    path = Path(path)
    side = path.with_suffix(".json")
    data = path.with_suffix(".f64")
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    if not data.exists():
        raise FileNotFoundError(f"missing data file {data}")
    meta = json.loads(side.read_text())
    spec = GridSpec.from_dict(meta["grid"])
    vals = np.fromfile(data, dtype="<f8")
    if vals.size != spec.size:
        raise GridError(f"{data} holds {vals.size} values, sidecar expects {spec.size}")
    miss = meta.get("missing_value")
    if miss is not None:
        vals = np.where(vals == miss, np.nan, vals)
    return Field(spec, vals.astype(np.float64), meta["units"])


def write_tracks(path: str | os.PathLike, tracks: TrackSet, order: np.ndarray | int | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "sat_id,t_days,seconds_of_day,lat,lon,value"
    with open(path, "w") as fh:
        fh.write(header + (",order" if order is not None else "") + "\n")
        ords = None if order is None else np.broadcast_to(np.asarray(order), (len(tracks),))
        for i in range(len(tracks)):
            row = ",".join(
                [str(int(tracks.sat_id[i]))]
                + [repr(float(getattr(tracks, c)[i])) for c in ("t", "seconds_of_day", "lat", "lon", "value")]
            )
            if ords is not None:
                row += f",{int(ords[i])}"
            fh.write(row + "\n")


def read_tracks(path: str | os.PathLike) -> TrackSet:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    expected = ["sat_id", "t_days", "seconds_of_day", "lat", "lon", "value"]
    if header[:6] != expected:
        raise GridError(f"{path}: unexpected track header {header}")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if arr.size == 0:
        return TrackSet.empty()
    return TrackSet(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], arr[:, 5])


def metric_offsets(spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Meridional and per-row zonal pixel sizes in metres."""
    dy = spec.dlat * M_PER_DEG
    dx = spec.dlon * M_PER_DEG * np.cos(np.deg2rad(spec.lats))
    return np.full(spec.nlat, dy), dx


__all__ = [
    "EARTH_RADIUS_M",
    "M_PER_DEG",
    "Field",
    "GridError",
    "GridSpec",
    "MaskedSupportError",
    "PointSample",
    "TrackSet",
    "TrilinearStencil",
    "bilinear_slice",
    "build_stencil",
    "metric_offsets",
    "read_field",
    "read_tracks",
    "regrid_bilinear",
    "sample_trilinear",
    "scatter_adjoint",
    "stencil_for",
    "write_field",
    "write_tracks",
]
