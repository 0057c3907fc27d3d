"""Along-track first and second derivatives of SSH.

Derivatives are finite differences between consecutive samples of one
satellite, placed at the midpoint of the pair. Each ``DerivedTrackSet`` keeps
the pair indices into its parent so the difference operator and its transpose
can be applied to other series sampled on the same support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import EARTH_RADIUS_M, GridError, TrackSet, write_tracks


def haversine_m(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_M) -> np.ndarray:
    p1, p2 = np.deg2rad(lat1), np.deg2rad(lat2)
    dp = p2 - p1
    dl = np.deg2rad(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * radius * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


@dataclass(frozen=True)
class DerivedTrackSet:
    """Derivative samples; ``left``/``right`` index the parent series, ``ds`` in metres."""

    samples: TrackSet
    order: int
    ds: np.ndarray
    left: np.ndarray
    right: np.ndarray
    n_parent: int
    n_duplicates: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def values(self) -> np.ndarray:
        return self.samples.value

    def apply(self, parent_values: np.ndarray) -> np.ndarray:
        """Difference quotient of an arbitrary series defined on the parent support."""
        y = np.asarray(parent_values, dtype=np.float64)
        if y.shape != (self.n_parent,):
            raise GridError("series length does not match the parent support")
        return (y[self.right] - y[self.left]) / self.ds

    def transpose(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=np.float64) / self.ds
        out = np.bincount(self.right, weights=r, minlength=self.n_parent)
        out -= np.bincount(self.left, weights=r, minlength=self.n_parent)
        return out


def _difference(parent: TrackSet, left: np.ndarray, right: np.ndarray, order: int, n_dup: int) -> DerivedTrackSet:
    ds = haversine_m(parent.lat[left], parent.lon[left], parent.lat[right], parent.lon[right])
    keep = ds > 0
    n_dup += int(np.count_nonzero(~keep))
    left, right, ds = left[keep], right[keep], ds[keep]
    value = (parent.value[right] - parent.value[left]) / ds
    mid = {
        "sat_id": parent.sat_id[left],
        "t": 0.5 * (parent.t[left] + parent.t[right]),
        "seconds_of_day": 0.5 * (parent.seconds_of_day[left] + parent.seconds_of_day[right]),
        "lat": 0.5 * (parent.lat[left] + parent.lat[right]),
        "lon": 0.5 * (parent.lon[left] + parent.lon[right]),
    }
    # sort up front so that the TrackSet constructor keeps our index order
    o = np.lexsort((mid["seconds_of_day"], mid["t"], mid["sat_id"]))
    samples = TrackSet(*(mid[k][o] for k in ("sat_id", "t", "seconds_of_day", "lat", "lon")), value[o])
    return DerivedTrackSet(samples, order, ds[o], left[o], right[o], len(parent), n_dup)


def along_track_derivative(obs: TrackSet, max_gap_s: float = 2.0) -> DerivedTrackSet:
    """First derivative from consecutive same-satellite, same-day samples less than ``max_gap_s`` apart."""
    n = len(obs)
    if n < 2:
        return _difference(obs, np.zeros(0, np.int64), np.zeros(0, np.int64), 1, 0)
    i = np.arange(n - 1)
    same_sat = obs.sat_id[1:] == obs.sat_id[:-1]
    same_day = np.floor(obs.t[1:]) == np.floor(obs.t[:-1])
    close = np.abs(obs.seconds_of_day[1:] - obs.seconds_of_day[:-1]) < max_gap_s
    ok = same_sat & same_day & close
    return _difference(obs, i[ok], i[ok] + 1, 1, 0)


def second_derivative(d1: DerivedTrackSet) -> DerivedTrackSet:
    """Difference of neighbouring first derivatives that share a parent sample."""
    if d1.order != 1:
        raise ValueError("second_derivative expects a first-order derivative set")
    n = len(d1)
    if n < 2:
        return _difference(d1.samples, np.zeros(0, np.int64), np.zeros(0, np.int64), 2, 0)
    i = np.arange(n - 1)
    ok = d1.right[:-1] == d1.left[1:]
    return _difference(d1.samples, i[ok], i[ok] + 1, 2, 0)


def write_derived(path, d: DerivedTrackSet) -> None:
    write_tracks(path, d.samples, order=d.order)
