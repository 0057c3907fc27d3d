import numpy as np
import pytest

from sshrecon.gridcore import Field, GridError, GridSpec, TrackSet, sample_trilinear
from sshrecon.obssim import (
    KM_PER_DEG,
    SshObsParams,
    SstObsParams,
    box_kernel_size,
    build_climatology,
    coarse_noise,
    deseasonalize,
    inclined_tracks,
    prepare_cloud_cover,
    rasterize_tracks,
    shift_support,
    simulate_ssh_obs,
    simulate_sst_obs,
    synthetic_cloud_cover,
)
from sshrecon.truthgen import TruthConfig, generate_truth, gulf_stream_spec

from .conftest import random_field, random_points


def test_ssh_noise_free_constant(small_spec, rng):
    truth = Field(small_spec, np.full(small_spec.shape, 0.42))
    obs = simulate_ssh_obs(truth, random_points(small_spec, 100, rng), SshObsParams(0.0, 1))
    np.testing.assert_allclose(obs.value, 0.42, atol=1e-15)


def test_ssh_noise_level(small_spec, rng):
    truth = Field(small_spec, np.full(small_spec.shape, 0.1))
    obs = simulate_ssh_obs(truth, random_points(small_spec, 100_000, rng), SshObsParams(0.019, 5))
    sd = np.std(obs.value - 0.1)
    assert 0.0186 <= sd <= 0.0194


def test_ssh_empty_support(small_spec):
    truth = Field(small_spec, np.zeros(small_spec.shape))
    assert len(simulate_ssh_obs(truth, TrackSet.empty())) == 0


def test_ssh_operator_is_sampling_without_noise(small_spec, rng):
    truth = random_field(small_spec, rng)
    pts = random_points(small_spec, 300, rng)
    obs = simulate_ssh_obs(truth, pts, SshObsParams(0.0))
    assert np.array_equal(obs.value, sample_trilinear(truth, pts))
    assert np.array_equal(obs.lat, pts.lat) and np.array_equal(obs.sat_id, pts.sat_id)


def test_ssh_deterministic_per_seed(small_spec, rng):
    truth = random_field(small_spec, rng)
    pts = random_points(small_spec, 50, rng)
    a = simulate_ssh_obs(truth, pts, SshObsParams(0.02, 9))
    b = simulate_ssh_obs(truth, pts, SshObsParams(0.02, 9))
    c = simulate_ssh_obs(truth, pts, SshObsParams(0.02, 10))
    assert a.equals(b) and not a.equals(c)


def test_shift_support():
    base = TrackSet([0, 0, 1], [0.0, 100.5, 7000.0], [0, 43200, 0], [35, 36, 37], [-60, -60, -60], [0, 0, 0])
    assert shift_support(base, 0.0, 0.0, 7194.0).equals(base)
    assert np.allclose(shift_support(base, 7194.0, 0.0, 7194.0).t, base.t)
    shifted = shift_support(base, 772.0, 0.0, 7194.0)
    expected = np.sort(np.mod(base.t + 772.0, 7194.0))
    np.testing.assert_allclose(np.sort(shifted.t), expected)
    # 7000 + 772 wraps to 578
    assert 578.0 in shifted.t
    t0 = 10.0
    s2 = shift_support(base.with_times(base.t + t0), 772.0, t0, 7194.0)
    np.testing.assert_allclose(np.sort(s2.t), np.sort(np.mod(base.t + 772.0, 7194.0) + t0))


def test_rasterize_single_and_pair():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 4, 4, 0.5, 1.0, 3)
    one = TrackSet([0], [1.4], [0], [39.9], [-59.8], [0.7])
    f, c = rasterize_tracks(one, spec)
    assert f.values[1, 1, 2] == 0.7 and c.values[1, 1, 2] == 1
    assert c.values.sum() == 1 and np.count_nonzero(f.values) == 1
    two = TrackSet([0, 1], [1.4, 1.6], [0, 0], [39.9, 39.91], [-59.8, -59.79], [1.0, 3.0])
    f, c = rasterize_tracks(two, spec)
    assert f.values[1, 1, 2] == 2.0 and c.values[1, 1, 2] == 2


def test_rasterize_empty_and_daily_only():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 4, 4, 0.5, 1.0, 3)
    f, c = rasterize_tracks(TrackSet.empty(), spec)
    assert not f.values.any() and not c.values.any()
    with pytest.raises(GridError):
        rasterize_tracks(TrackSet.empty(), spec.with_time(0.0, 0.5, 3))


def test_rasterize_constant_truth(small_spec, rng):
    truth = Field(small_spec.with_time(0.5, 1.0, 5), np.full(small_spec.shape, -0.3))
    pts = random_points(truth.spec, 500, rng)
    obs = simulate_ssh_obs(truth, pts, SshObsParams(0.0))
    f, c = rasterize_tracks(obs, truth.spec)
    np.testing.assert_allclose(f.values[c.values > 0], -0.3, rtol=1e-15)
    assert c.values.sum() == len(obs)


def test_inclined_tracks_shape_and_rules():
    spec = gulf_stream_spec(64, 10)
    tr = inclined_tracks(spec, n_sat=3, seed=2)
    assert tr.satellites == [0, 1, 2]
    assert (tr.lat >= spec.lat_min).all() and (tr.lat <= spec.lat0).all()
    # consecutive samples within a pass are 1 s and about 6.5 km apart
    same = (np.diff(tr.sat_id) == 0) & (np.diff(tr.seconds_of_day) == 1.0)
    assert same.sum() > 0.9 * len(tr)
    # time and second-of-day agree
    np.testing.assert_allclose(np.floor(tr.t) + tr.seconds_of_day / 86400.0, tr.t, atol=1e-9)


# --------------------------------------------------------------------------- clouds


def test_cloud_all_clear_and_all_cloudy():
    spec = gulf_stream_spec(32, 4)
    for v in (0.0, 1.0):
        out = prepare_cloud_cover(Field(spec, np.full(spec.shape, v), "dimensionless"), spec, 43.0)
        np.testing.assert_allclose(out.values, v, atol=1e-15)


def test_cloud_edge_ramp():
    spec = gulf_stream_spec(64, 1)
    raw = np.zeros(spec.shape)
    raw[..., 32:] = 1.0
    out = prepare_cloud_cover(Field(spec, raw, "dimensionless"), spec, 43.0).values[0]
    _, kx = box_kernel_size(spec, 43.0)
    assert kx % 2 == 1
    row = out[10]
    inside = (row > 0) & (row < 1)
    assert inside.sum() == kx - 1
    last_zero = np.where(row == 0)[0].max()
    first_one = np.where(row == 1)[0].min()
    assert first_one - last_zero == kx
    assert np.all(np.diff(row) >= 0)


def test_cloud_tiling_and_regrid():
    src = GridSpec.from_box(32.0, 44.0, -66.0, -54.0, 24, 24, t0=0.5, nt=3)
    raw = np.zeros(src.shape)
    raw[1] = 1.0
    tgt = gulf_stream_spec(32, 7)
    out = prepare_cloud_cover(Field(src, raw, "dimensionless"), tgt, 43.0)
    assert out.spec == tgt
    np.testing.assert_allclose(out.values[[1, 4]], 1.0)
    np.testing.assert_allclose(out.values[[0, 2, 3, 5, 6]], 0.0)


def test_cloud_range_checked():
    spec = gulf_stream_spec(16, 1)
    with pytest.raises(ValueError):
        prepare_cloud_cover(Field(spec, np.full(spec.shape, 1.5), "dimensionless"), spec)
    with pytest.raises(ValueError):
        simulate_sst_obs(Field(spec, np.zeros(spec.shape), "degC"), Field(spec, np.full(spec.shape, -0.1), "dimensionless"))


def test_synthetic_cloud_binary():
    spec = gulf_stream_spec(32, 3)
    c = synthetic_cloud_cover(spec, seed=1, cloud_fraction=0.4)
    assert set(np.unique(c.values)) <= {0.0, 1.0}
    assert abs(c.values.mean() - 0.4) < 0.01


# --------------------------------------------------------------------------- SST operator


def sst_truth(spec, L_km=None, const=None):
    if const is not None:
        return Field(spec, np.full(spec.shape, const), "degC")
    x = (spec.lons - spec.lon_center) * KM_PER_DEG * np.cos(np.deg2rad(spec.lat_center))
    return Field(spec, np.broadcast_to(np.sin(2 * np.pi * x / L_km), spec.shape), "degC")


def test_sst_clear_sky_is_identity():
    spec = gulf_stream_spec(64, 4)
    truth = generate_truth(TruthConfig(spec=spec, n_eddies=2, seed=1))[1]
    zero = Field(spec, np.zeros(spec.shape), "dimensionless")
    out = simulate_sst_obs(truth, zero, SstObsParams(noise_sigma=0.0))
    assert np.array_equal(out.values, truth.values)


def test_sst_full_cloud_constant():
    spec = gulf_stream_spec(32, 4)
    one = Field(spec, np.ones(spec.shape), "dimensionless")
    out = simulate_sst_obs(sst_truth(spec, const=18.5), one, SstObsParams(noise_sigma=0.0))
    np.testing.assert_allclose(out.values, 18.5, rtol=1e-14)


@pytest.mark.parametrize("factor", [4, 8, 16])
def test_sst_gaussian_transfer(factor):
    p = SstObsParams(noise_sigma=0.0)
    spec = GridSpec.from_box(33.0, 43.0, -75.0, -45.0, 32, 384, t0=0.5, nt=3)
    L = factor * p.sigma_x
    one = Field(spec, np.ones(spec.shape), "dimensionless")
    truth = sst_truth(spec, L)
    out = simulate_sst_obs(truth, one, p).values[1, 16]
    x = (spec.lons - spec.lon_center) * KM_PER_DEG * np.cos(np.deg2rad(spec.lat_center))
    interior = slice(60, -60)
    A = np.column_stack([np.sin(2 * np.pi * x / L), np.cos(2 * np.pi * x / L)])[interior]
    coef = np.linalg.lstsq(A, out[interior], rcond=None)[0]
    amp = np.hypot(*coef)
    expected = np.exp(-2 * np.pi**2 * p.sigma_x**2 / L**2)
    assert amp == pytest.approx(expected, rel=0.03)


def test_sst_blend_bounds():
    spec = gulf_stream_spec(32, 6)
    rng = np.random.default_rng(0)
    truth = Field(spec, rng.standard_normal(spec.shape), "degC")
    C = (rng.uniform(size=spec.shape) > 0.5).astype(float)
    p = SstObsParams(noise_sigma=0.2, seed=4)
    out = simulate_sst_obs(truth, Field(spec, C, "dimensionless"), p).values
    noisy = truth.values + coarse_noise(spec, p.noise_coarse_n, p.noise_sigma, p.seed)
    from sshrecon.obssim import gaussian_space_time_blur

    blur = gaussian_space_time_blur(noisy, spec, p.sigma_t, p.sigma_x)
    lo, hi = np.minimum(noisy, blur), np.maximum(noisy, blur)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)
    np.testing.assert_array_equal(out[C == 0], noisy[C == 0])


def test_noise_reproducible_and_independent():
    spec = gulf_stream_spec(128, 10)
    a = coarse_noise(spec, 32, 1.0, 11)
    assert np.array_equal(a, coarse_noise(spec, 32, 1.0, 11))
    b = coarse_noise(spec, 32, 1.0, 12)
    idx = np.random.default_rng(0).choice(a.size, 10_000, replace=False)
    r = np.corrcoef(a.ravel()[idx], b.ravel()[idx])[0, 1]
    assert abs(r) < 0.05


def test_coarse_noise_is_smooth_upsampling():
    spec = gulf_stream_spec(128, 1)
    n = coarse_noise(spec, 32, 1.0, 3)[0]
    # corners come straight from the coarse grid
    coarse = np.random.default_rng(3).normal(0.0, 1.0, (1, 32, 32))[0]
    assert n[0, 0] == pytest.approx(coarse[0, 0]) and n[-1, -1] == pytest.approx(coarse[-1, -1])


# --------------------------------------------------------------------------- deseasonalisation


def test_one_period_is_all_zero():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 3, 3, 0.0, 1.0, 10)
    rng = np.random.default_rng(0)
    sst = Field(spec, rng.standard_normal(spec.shape), "degC")
    out = deseasonalize(sst, build_climatology(sst, 10.0))
    assert not out.values.any()


def test_time_constant_field_zero_anomaly():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 3, 3, 0.0, 1.0, 25)
    sst = Field(spec, np.broadcast_to(np.arange(9.0).reshape(3, 3), spec.shape), "degC")
    out = deseasonalize(sst, build_climatology(sst, 7.0))
    np.testing.assert_allclose(out.values, 0.0, atol=1e-14)


def test_two_period_anomaly():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 2, 2, 0.0, 1.0, 8)
    vals = np.zeros(spec.shape)
    a, b = 3.0, 7.0
    vals[1] = a
    vals[5] = b
    out = deseasonalize(Field(spec, vals, "degC"), build_climatology(Field(spec, vals, "degC"), 4.0)).values
    np.testing.assert_allclose(out[1], (a - b) / 2)
    np.testing.assert_allclose(out[5], (b - a) / 2)


def test_short_record_rejected():
    spec = GridSpec(40.0, -60.0, 0.1, 0.1, 2, 2, 0.0, 1.0, 5)
    with pytest.raises(ValueError):
        build_climatology(Field(spec, np.zeros(spec.shape), "degC"), 365.0)
