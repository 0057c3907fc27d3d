import numpy as np
import pytest

from sshrecon.gridcore import Field, GridSpec, TrackSet


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return GridSpec(lat0=40.0, lon0=-60.0, dlat=0.1, dlon=0.1, nlat=16, nlon=16, t0=0.0, dt=1.0, nt=5)


def random_points(spec: GridSpec, n: int, rng, n_sat: int = 2) -> TrackSet:
    t = rng.uniform(spec.t0, spec.t_max, n)
    lat = rng.uniform(spec.lat_min, spec.lat0, n)
    lon = rng.uniform(spec.lon0, spec.lon_max, n)
    sat = rng.integers(0, n_sat, n)
    sec = np.mod(t, 1.0) * 86400.0
    return TrackSet(sat, t, sec, lat, lon, np.zeros(n))


def random_field(spec: GridSpec, rng, units: str = "m") -> Field:
    return Field(spec, rng.standard_normal(spec.shape), units)


def random_tracks(spec: GridSpec, rng, n_sat: int = 2, n_pass: int = 4, n_per: int = 25) -> TrackSet:
    """Straight passes sampled once per second, clipped to the box."""
    cols = [[] for _ in range(5)]
    height = spec.lat0 - spec.lat_min
    width = spec.lon_max - spec.lon0
    for p in range(n_pass):
        sat = p % n_sat
        day = int(rng.integers(int(np.floor(spec.t0)), max(int(np.floor(spec.t_max)), int(np.floor(spec.t0)) + 1)))
        sec = rng.uniform(1000.0, 80000.0) + np.arange(n_per)
        heading = rng.uniform(0, 2 * np.pi)
        step = 0.7 * min(height, width) / n_per
        lat = rng.uniform(spec.lat_min, spec.lat0) + step * np.cos(heading) * np.arange(n_per)
        lon = rng.uniform(spec.lon0, spec.lon_max) + step * np.sin(heading) * np.arange(n_per)
        ok = (lat >= spec.lat_min) & (lat <= spec.lat0) & (lon >= spec.lon0) & (lon <= spec.lon_max)
        t = day + sec / 86400.0
        ok &= (t >= spec.t0) & (t <= spec.t_max)
        for c, a in zip(cols, (np.full(n_per, sat), t, sec, lat, lon)):
            c.append(a[ok])
    cat = [np.concatenate(c) for c in cols]
    return TrackSet(*cat, np.zeros(cat[0].size))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
