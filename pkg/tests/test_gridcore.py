import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sshrecon.gridcore import (
    Field,
    GridError,
    GridSpec,
    MaskedSupportError,
    TrackSet,
    read_field,
    read_tracks,
    regrid_bilinear,
    sample_trilinear,
    scatter_adjoint,
    stencil_for,
    write_field,
    write_tracks,
)

from .conftest import random_field, random_points


def _points(t, lat, lon, sat=0):
    t, lat, lon = (np.atleast_1d(np.asarray(a, float)) for a in (t, lat, lon))
    return TrackSet(np.full(t.size, sat), t, np.zeros(t.size), lat, lon, np.zeros(t.size))


def brute_trilinear(values, spec, t, lat, lon):
    """Independent evaluation: explicit loop over the 8 corners."""
    ft = (t - spec.t0) / spec.dt
    fy = (spec.lat0 - lat) / spec.dlat
    fx = (lon - spec.lon0) / spec.dlon
    k, i, j = int(np.floor(ft)), int(np.floor(fy)), int(np.floor(fx))
    k, i, j = min(k, spec.nt - 2), min(i, spec.nlat - 2), min(j, spec.nlon - 2)
    a, b, c = ft - k, fy - i, fx - j
    total = 0.0
    for dk, di, dj in itertools.product((0, 1), repeat=3):
        w = (a if dk else 1 - a) * (b if di else 1 - b) * (c if dj else 1 - c)
        total += w * values[k + dk, i + di, j + dj]
    return total


def test_gridspec_validation():
    with pytest.raises(GridError):
        GridSpec(40, -60, -0.1, 0.1, 4, 4)
    with pytest.raises(GridError):
        GridSpec(40, -60, 0.1, 0.1, 0, 4)
    with pytest.raises(GridError):
        GridSpec(90.0, -60, 0.1, 0.1, 4, 4)
    s = GridSpec.from_box(33, 43, -65, -55, 128, 128)
    assert s.dlat == pytest.approx(0.078125)
    assert s.lat0 == pytest.approx(43 - 0.078125 / 2)
    assert s.lats[-1] == pytest.approx(33 + 0.078125 / 2)


def test_constant_field(small_spec, rng):
    f = Field(small_spec, np.full(small_spec.shape, 3.0))
    pts = random_points(small_spec, 50, rng)
    np.testing.assert_allclose(sample_trilinear(f, pts), 3.0, rtol=0, atol=1e-14)


def test_linear_in_longitude(small_spec, rng):
    a = 0.37
    vals = a * np.broadcast_to(small_spec.lons, small_spec.shape)
    pts = random_points(small_spec, 50, rng)
    np.testing.assert_allclose(sample_trilinear(Field(small_spec, vals), pts), a * pts.lon, rtol=1e-13)


def test_cell_center_of_2x2x2():
    spec = GridSpec(1.0, 0.0, 1.0, 1.0, 2, 2, 0.0, 1.0, 2)
    f = Field(spec, np.arange(8.0))
    out = sample_trilinear(f, _points(0.5, 0.5, 0.5))
    assert out[0] == pytest.approx(np.mean(np.arange(8.0)), abs=1e-15)


def test_matches_brute_force(small_spec, rng):
    f = random_field(small_spec, rng)
    pts = random_points(small_spec, 40, rng)
    expected = [brute_trilinear(f.values, small_spec, p.t, p.lat, p.lon) for p in pts]
    np.testing.assert_allclose(sample_trilinear(f, pts), expected, rtol=1e-13)


def test_affine_fields_reproduced_exactly(small_spec, rng):
    for _ in range(5):
        c = rng.standard_normal(8)
        T, Y, X = np.meshgrid(small_spec.times, small_spec.lats, small_spec.lons, indexing="ij")
        vals = c[0] + c[1] * T + c[2] * Y + c[3] * X + c[4] * T * Y + c[5] * Y * X + c[6] * T * X + c[7] * T * Y * X
        pts = random_points(small_spec, 100, rng)
        t, y, x = pts.t, pts.lat, pts.lon
        exact = c[0] + c[1] * t + c[2] * y + c[3] * x + c[4] * t * y + c[5] * y * x + c[6] * t * x + c[7] * t * y * x
        got = sample_trilinear(Field(small_spec, vals), pts)
        assert np.max(np.abs(got - exact)) < 1e-12 * max(1.0, np.abs(exact).max())


def test_weights_sum_to_one(small_spec, rng):
    st_ = stencil_for(random_points(small_spec, 200, rng), small_spec)
    np.testing.assert_allclose(st_.weight.sum(axis=1), 1.0, atol=1e-14)
    assert (st_.weight >= 0).all()


def test_spatial_clamp_and_time_rejection(small_spec):
    f = Field(small_spec, np.broadcast_to(small_spec.lons, small_spec.shape))
    out = sample_trilinear(f, _points(1.0, small_spec.lat_center, small_spec.lon_max + 3.0))
    assert out[0] == pytest.approx(small_spec.lon_max)
    # within dt of the time range is clamped, beyond is rejected
    sample_trilinear(f, _points(small_spec.t_max + 0.5, 39.5, -59.5))
    with pytest.raises(GridError):
        sample_trilinear(f, _points(small_spec.t_max + 1.5, 39.5, -59.5))


def test_empty_and_masked(small_spec):
    f = Field(small_spec, np.ones(small_spec.shape))
    assert sample_trilinear(f, TrackSet.empty()).size == 0
    vals = np.ones(small_spec.shape)
    vals[0, 0, 0] = np.nan
    with pytest.raises(MaskedSupportError, match="masked cell under support"):
        sample_trilinear(Field(small_spec, vals), _points(0.2, small_spec.lat0 - 0.02, small_spec.lon0 + 0.02))
    # a point whose stencil does not touch the masked cell is fine
    assert sample_trilinear(Field(small_spec, vals), _points(3.0, 39.0, -59.0))[0] == pytest.approx(1.0)


def test_scatter_on_node(small_spec):
    spec = small_spec
    pts = _points(spec.times[2], spec.lats[3], spec.lons[7])
    out = scatter_adjoint(pts, [1.0], spec).values
    assert out[2, 3, 7] == pytest.approx(1.0)
    assert out.sum() == pytest.approx(1.0)
    assert np.count_nonzero(np.abs(out) > 1e-14) == 1


def test_scatter_empty_and_mismatch(small_spec):
    assert not scatter_adjoint(TrackSet.empty(), [], small_spec).values.any()
    with pytest.raises(GridError):
        scatter_adjoint(_points(1.0, 39.5, -59.5), [1.0, 2.0], small_spec)


def test_adjoint_identity(small_spec, rng):
    for _ in range(20):
        x = random_field(small_spec, rng)
        pts = random_points(small_spec, int(rng.integers(1, 300)), rng)
        y = rng.standard_normal(len(pts))
        lhs = np.dot(sample_trilinear(x, pts), y)
        rhs = np.sum(x.values * scatter_adjoint(pts, y, small_spec).values)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1e-300) or abs(lhs - rhs) < 1e-13


def test_gram_matrix_psd(rng):
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 5, 5, 0.0, 1.0, 3)
    pts = random_points(spec, 12, rng)
    st_ = stencil_for(pts, spec)
    # assemble H column by column through the public operators
    H = np.stack([st_.apply(e.reshape(spec.shape)) for e in np.eye(spec.size)], axis=1)
    HT = np.stack([st_.adjoint(e) for e in np.eye(len(pts))], axis=0).reshape(len(pts), -1)
    np.testing.assert_allclose(H, HT, atol=1e-15)
    eig = np.linalg.eigvalsh(H @ H.T)
    assert eig.min() > -1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 80))
def test_adjoint_property(seed, n):
    rng = np.random.default_rng(seed)
    spec = GridSpec(41.0, -62.0, 0.2, 0.25, 7, 9, 3.0, 0.5, 4)
    x = random_field(spec, rng)
    pts = random_points(spec, n, rng)
    y = rng.standard_normal(n)
    lhs = np.dot(sample_trilinear(x, pts), y)
    rhs = np.vdot(x.values, scatter_adjoint(pts, y, spec).values)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_regrid_identity_and_constant(small_spec, rng):
    f = random_field(small_spec, rng)
    same = regrid_bilinear(f, small_spec)
    assert np.array_equal(same.values, f.values)
    c = Field(small_spec, np.full(small_spec.shape, -2.5))
    tgt = GridSpec(39.85, -59.9, 0.037, 0.05, 30, 25, 0.0, 1.0, 5)
    np.testing.assert_allclose(regrid_bilinear(c, tgt).values, -2.5, atol=1e-14)


def test_regrid_linear_in_lat_refined(small_spec):
    slope = 0.8
    vals = slope * np.broadcast_to(small_spec.lats[:, None], small_spec.shape)
    f = Field(small_spec, vals)
    fine = GridSpec(small_spec.lat0, small_spec.lon0, 0.05, 0.05, 31, 31, 0.0, 1.0, 5)
    out = regrid_bilinear(f, fine)
    np.testing.assert_allclose(out.values, slope * np.broadcast_to(fine.lats[:, None], fine.shape), rtol=1e-13)


def test_regrid_rejects_extrapolation(small_spec, rng):
    f = random_field(small_spec, rng)
    with pytest.raises(GridError, match="extrapolation not supported"):
        regrid_bilinear(f, GridSpec(41.0, -60.0, 0.1, 0.1, 10, 10, 0.0, 1.0, 5))
    with pytest.raises(GridError):
        regrid_bilinear(f, small_spec.with_time(0.0, 1.0, 4))


def test_field_container_round_trip(tmp_path, small_spec, rng):
    f = random_field(small_spec, rng, "degC")
    write_field(tmp_path / "x", f)
    g = read_field(tmp_path / "x")
    assert g.spec == f.spec and g.units == "degC"
    assert np.array_equal(g.values, f.values)
    raw = np.fromfile(tmp_path / "x.f64", dtype="<f8")
    assert np.array_equal(raw, f.values.ravel())
    (tmp_path / "x.json").unlink()
    with pytest.raises(FileNotFoundError):
        read_field(tmp_path / "x")


def test_missing_sentinel(tmp_path, small_spec):
    vals = np.ones(small_spec.shape)
    vals[1, 2, 3] = np.nan
    write_field(tmp_path / "m", Field(small_spec, vals), missing=-9999.0)
    back = read_field(tmp_path / "m").values
    assert np.isnan(back[1, 2, 3]) and np.nansum(back) == small_spec.size - 1


def test_tracks_csv_round_trip(tmp_path, small_spec, rng):
    pts = random_points(small_spec, 30, rng)
    pts = pts.with_values(rng.standard_normal(30))
    write_tracks(tmp_path / "t.csv", pts)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "sat_id,t_days,seconds_of_day,lat,lon,value"
    assert read_tracks(tmp_path / "t.csv").equals(pts)


def test_trackset_sorted():
    ts = TrackSet([1, 0, 0], [2.0, 5.0, 1.0], [0, 0, 0], [40, 41, 42], [-60, -60, -60], [1, 2, 3])
    assert list(ts.sat_id) == [0, 0, 1]
    assert list(ts.value) == [3, 2, 1]
    assert ts[0].lat == 42
