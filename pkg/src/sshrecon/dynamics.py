"""Geostrophic diagnostics on equirectangular grids."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gridcore import M_PER_DEG, Field, GridError, GridSpec


@dataclass(frozen=True)
class PhysConsts:
    g: float = 9.81
    omega_r: float = 7.2921159e-5

    def __post_init__(self):
        if self.g <= 0 or self.omega_r <= 0:
            raise ValueError("physical constants must be positive")


DEFAULT_CONSTS = PhysConsts()


class GeostrophyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class VelocityField:
    u: Field
    v: Field

    def __post_init__(self):
        if self.u.spec != self.v.spec:
            raise GridError("u and v must share one GridSpec")

    @property
    def spec(self) -> GridSpec:
        return self.u.spec

    def speed(self) -> np.ndarray:
        return np.hypot(self.u.values, self.v.values)

    def time_slice(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.u.values[k], self.v.values[k]


def coriolis(lat, c: PhysConsts = DEFAULT_CONSTS):
    lat_arr = np.asarray(lat, dtype=np.float64)
    if np.any(np.abs(lat_arr) >= 90):
        raise ValueError("|lat| must be < 90")
    if np.any(np.abs(lat_arr) < 5):
        warnings.warn("geostrophy unreliable within 5 degrees of the equator", GeostrophyWarning, stacklevel=2)
    f = 2.0 * c.omega_r * np.sin(np.deg2rad(lat_arr))
    return float(f) if np.ndim(lat) == 0 else f


def ddx(a: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Eastward derivative (per metre) of a (..., lat, lon) array."""
    dx = spec.dlon * M_PER_DEG * np.cos(np.deg2rad(spec.lats))
    if spec.nlon < 3:
        raise GridError("need at least 3 longitudes for derivatives")
    return np.gradient(a, axis=-1, edge_order=2) / dx[:, None]


def ddy(a: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Northward derivative (per metre); rows run southward so the sign flips."""
    if spec.nlat < 3:
        raise GridError("need at least 3 latitudes for derivatives")
    return -np.gradient(a, axis=-2, edge_order=2) / (spec.dlat * M_PER_DEG)


def _row_coriolis(spec: GridSpec, c: PhysConsts) -> np.ndarray:
    f = coriolis(spec.lats, c)
    if np.any(f == 0):
        raise GridError("Coriolis factor vanishes inside the domain")
    return f


def geostrophic_currents(ssh: Field, c: PhysConsts = DEFAULT_CONSTS) -> VelocityField:
    if ssh.units != "m":
        raise GridError(f"SSH must be in metres, got {ssh.units}")
    spec = ssh.spec
    f = _row_coriolis(spec, c)[:, None]
    h = ssh.values
    u = -(c.g / f) * ddy(h, spec)
    v = (c.g / f) * ddx(h, spec)
    return VelocityField(Field(spec, u, "m/s"), Field(spec, v, "m/s"))


def relative_vorticity(vel: VelocityField, normalize_by_f: bool = False, c: PhysConsts = DEFAULT_CONSTS) -> Field:
    spec = vel.spec
    xi = ddx(vel.v.values, spec) - ddy(vel.u.values, spec)
    if normalize_by_f:
        return Field(spec, xi / _row_coriolis(spec, c)[:, None], "dimensionless")
    return Field(spec, xi, "1/s")
