import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cumolos.errors import FieldReadError, MissingVariableError, ParameterError, ShapeError
from cumolos.field_io import (
    SyntheticSpec,
    TimeHeightField,
    assemble_patches,
    denormalize,
    extract_patches,
    generate_synthetic,
    load_field,
    normalize,
    preprocess,
    read_records,
    save_binary,
    save_netcdf,
    synthetic_template,
    write_records,
)


def make_field(v, i=None, step=15.0):
    v = np.asarray(v, dtype=float)
    return TimeHeightField(v, np.full(v.shape, 0.05) if i is None else np.asarray(i, float), step)


def test_netcdf_roundtrip_full_day(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(0, 2, (5760, 320)).astype(np.float32)
    inten = rng.uniform(0, 0.1, (5760, 320)).astype(np.float32)
    field = TimeHeightField(v, inten, 15.0, 30.0)
    path = save_netcdf(field, tmp_path / "day.nc")
    back = load_field(path)
    assert back.shape == (5760, 320)
    assert back.gate_count == 320
    np.testing.assert_array_equal(back.velocity, v.astype(np.float64))
    np.testing.assert_array_equal(back.intensity, inten.astype(np.float64))
    assert back.time_step_s == 15.0 and back.gate_spacing_m == 30.0
    assert back.validity is None


def test_netcdf_custom_variable_names(tmp_path):
    field = make_field(np.ones((8, 4)))
    names = {"velocity": "w", "intensity": "snr", "time": "t"}
    save_netcdf(field, tmp_path / "f.nc", names)
    back = load_field(tmp_path / "f.nc", names)
    np.testing.assert_array_equal(back.velocity, 1.0)


def test_netcdf_missing_intensity(tmp_path):
    import netCDF4

    path = tmp_path / "bad.nc"
    with netCDF4.Dataset(path, "w") as ds:
        ds.createDimension("time", 4)
        ds.createDimension("range", 3)
        ds.createVariable("velocity", "f4", ("time", "range"))[:] = 0.0
        ds.time_step_s = 1.0
    with pytest.raises(MissingVariableError, match="intensity"):
        load_field(path)


def test_netcdf_non_2d_velocity(tmp_path):
    import netCDF4

    path = tmp_path / "bad.nc"
    with netCDF4.Dataset(path, "w") as ds:
        ds.createDimension("time", 100)
        ds.createVariable("velocity", "f4", ("time",))[:] = 0.0
        ds.createVariable("intensity", "f4", ("time",))[:] = 0.0
        ds.time_step_s = 1.0
    with pytest.raises(ShapeError):
        load_field(path)


def test_unreadable_file(tmp_path):
    with pytest.raises(FieldReadError):
        load_field(tmp_path / "nope.nc")
    junk = tmp_path / "junk.nc"
    junk.write_bytes(b"not a netcdf file at all")
    with pytest.raises(FieldReadError):
        load_field(junk)


def test_netcdf_fill_values_become_nan(tmp_path):
    v = np.ones((4, 4))
    v[1, 2] = np.nan
    save_netcdf(make_field(v), tmp_path / "f.nc")
    back = load_field(tmp_path / "f.nc")
    assert np.isnan(back.velocity[1, 2])
    assert np.isfinite(back.velocity).sum() == 15


def test_binary_container_layout(tmp_path):
    import struct

    v = np.arange(6, dtype=np.float32).reshape(2, 3)
    i = v + 100
    path = save_binary(TimeHeightField(v, i, 1.5, 30.0), tmp_path / "f.cmls")
    raw = path.read_bytes()
    magic, version, T, G, step, spacing = struct.unpack_from("<4sIIIff", raw)
    assert (magic, version, T, G, step, spacing) == (b"CMLS", 1, 2, 3, 1.5, 30.0)
    payload = np.frombuffer(raw, "<f4", offset=24)
    np.testing.assert_array_equal(payload[:6], v.ravel())
    np.testing.assert_array_equal(payload[6:], i.ravel())
    back = load_field(path)
    np.testing.assert_array_equal(back.velocity, v)


def test_binary_multiple_records(tmp_path):
    a, b = np.ones((2, 2)), np.zeros((2, 2))
    path = write_records(tmp_path / "r.cmls", [(a, b), (b, a)])
    recs = read_records(path)
    assert len(recs) == 2
    np.testing.assert_array_equal(recs[1].intensity, a)


def test_binary_truncated(tmp_path):
    path = save_binary(make_field(np.ones((4, 4))), tmp_path / "f.cmls")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FieldReadError):
        load_field(path)


def test_field_shape_checks():
    with pytest.raises(ShapeError):
        TimeHeightField(np.ones(5), np.ones(5), 1.0)
    with pytest.raises(ShapeError):
        TimeHeightField(np.ones((3, 2)), np.ones((2, 3)), 1.0)
    with pytest.raises(ParameterError):
        TimeHeightField(np.ones((3, 2)), np.ones((3, 2)), -1.0)


# -- preprocess ---------------------------------------------------------------


def test_preprocess_pixel_cases():
    v = np.array([[7.2, 1.0, -5.0, -9.0]])
    i = np.array([[0.01, 0.004, 0.005, 1.0]])
    out = preprocess(make_field(v, i))
    assert out.velocity[0, 0] == 5.0 and out.validity[0, 0]
    assert not out.validity[0, 1]
    assert out.velocity[0, 2] == -5.0 and out.validity[0, 2]
    assert out.velocity[0, 3] == -5.0 and out.validity[0, 3]


def test_preprocess_negative_threshold():
    with pytest.raises(ParameterError):
        preprocess(make_field(np.ones((2, 2))), snr_threshold=-0.1)


def test_preprocess_nan_velocity_is_invalid():
    v = np.array([[np.nan, 1.0]])
    out = preprocess(make_field(v, [[1.0, 1.0]]))
    assert out.validity.tolist() == [[False, True]]


finite_fields = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.one_of(st.floats(-50, 50), st.just(float("nan"))), min_size=n * 3, max_size=n * 3),
        st.lists(st.floats(0, 0.02), min_size=n * 3, max_size=n * 3),
    ).map(lambda vi: (np.array(vi[0]).reshape(n, 3), np.array(vi[1]).reshape(n, 3)))
)


@given(finite_fields)
@settings(max_examples=60, deadline=None)
def test_preprocess_idempotent_and_clamped(vi):
    v, i = vi
    once = preprocess(make_field(v, i))
    twice = preprocess(once)
    np.testing.assert_array_equal(once.velocity, twice.velocity)
    np.testing.assert_array_equal(once.validity, twice.validity)
    np.testing.assert_array_equal(once.intensity, twice.intensity)
    finite = once.velocity[np.isfinite(once.velocity)]
    assert np.all((finite >= -5) & (finite <= 5))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=50))
def test_normalize_roundtrip(vals):
    v = np.array(vals)
    np.testing.assert_allclose(denormalize(normalize(v)), v, rtol=1e-15, atol=1e-15)


# -- patches -----------------------------------------------------------------


def test_patch_count_full_day():
    f = preprocess(make_field(np.zeros((5760, 320))))
    patches = extract_patches(f)
    assert len(patches) == 90
    assert all(p.shape == (64, 64) and p.g_origin == 0 for p in patches)
    assert [p.t_origin for p in patches[:3]] == [0, 64, 128]


def test_window_too_large():
    f = preprocess(make_field(np.zeros((63, 64))))
    with pytest.raises(ShapeError):
        extract_patches(f, window_t=64)


def test_constant_field_all_ones():
    f = preprocess(make_field(np.full((128, 64), 5.0)))
    for p in extract_patches(f):
        np.testing.assert_array_equal(p.values, 1.0)
        assert p.validity.all()


def test_invalid_pixels_filled_with_zero():
    v = np.full((64, 64), 2.0)
    i = np.full((64, 64), 0.05)
    i[3, 4] = 0.0
    (p,) = extract_patches(preprocess(make_field(v, i)))
    assert p.values[3, 4] == 0.0 and not p.validity[3, 4]
    assert p.values[0, 0] == pytest.approx(0.4)


@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 2**31))
@settings(max_examples=20, deadline=None)
def test_tiling_is_a_partition(nt, ng, seed):
    rng = np.random.default_rng(seed)
    T, G = 8 * nt + 3, 8 * ng + 5
    v = rng.uniform(-8, 8, (T, G))
    v[rng.random((T, G)) < 0.1] = np.nan
    f = preprocess(make_field(v, rng.uniform(0, 0.01, (T, G))))
    patches = extract_patches(f, 8, 8, gate_limit=8 * ng)
    assert len(patches) == nt * ng
    coverage = assemble_patches(patches, [np.ones((8, 8))] * len(patches), fill=0.0)
    np.testing.assert_array_equal(coverage, 1.0)
    rebuilt = denormalize(assemble_patches(patches))
    sub = f.velocity[: 8 * nt, : 8 * ng]
    valid = f.validity[: 8 * nt, : 8 * ng]
    np.testing.assert_allclose(rebuilt[valid], sub[valid], rtol=0, atol=1e-12)
    assert np.all(rebuilt[~valid] == 0.0)
    for p in patches:
        assert np.all(np.isfinite(p.values))


def test_no_nan_escapes_raw_field():
    v = np.full((16, 16), np.nan)
    v[::2] = np.inf
    (p,) = extract_patches(make_field(v), 16, 16, 16)
    assert np.all(np.isfinite(p.values))
    assert not p.validity.any()


# -- synthetic ---------------------------------------------------------------


SMALL = SyntheticSpec(n_time=256, n_gates=64, n_blobs=40, n_shear_bands=6)


def test_synthetic_deterministic():
    a, b = generate_synthetic(SMALL, 7), generate_synthetic(SMALL, 7)
    np.testing.assert_array_equal(a.velocity, b.velocity)
    np.testing.assert_array_equal(a.intensity, b.intensity)
    c = generate_synthetic(SMALL, 8)
    assert not np.array_equal(a.velocity, c.velocity)


def test_synthetic_zero_noise_equals_template():
    from dataclasses import replace

    spec = replace(SMALL, noise_sigma=0.0, dropout_fraction=0.0)
    f = generate_synthetic(spec, 3)
    np.testing.assert_array_equal(f.velocity, synthetic_template(spec, 3))
    assert np.all(f.intensity >= 0.005)


def test_synthetic_dropout_fraction():
    from dataclasses import replace

    spec = replace(SMALL, dropout_fraction=0.2)
    f = generate_synthetic(spec, 11)
    frac = np.mean(f.intensity < 0.005)
    assert abs(frac - 0.2) <= 0.02


def test_synthetic_bad_dimensions():
    from dataclasses import replace

    with pytest.raises(ParameterError):
        generate_synthetic(replace(SMALL, n_time=0), 1)
