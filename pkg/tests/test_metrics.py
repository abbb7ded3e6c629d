import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cumolos.errors import MetadataError, ParameterError, ShapeError
from cumolos.field_io import TimeHeightField
from cumolos.metrics import (
    MetricsReport,
    RandomConvFeatures,
    fid,
    fidelity_counts,
    frechet_distance,
    gaussian_window,
    mse,
    psnr,
    spectral_fidelity,
    ssim,
    uncertainty_diagnostics,
    welch_psd,
)

# -- PSNR / MSE ---------------------------------------------------------------


def test_psnr_twenty_db():
    ref = np.zeros((8, 8))
    test = np.ones((8, 8))
    assert psnr(ref, test, data_range=10.0) == pytest.approx(20.0, abs=1e-12)


def test_psnr_hand_value():
    ref = np.zeros((2, 2))
    test = np.array([[0.0, 0.0, 0.0, math.sqrt(4 * 0.1854)]]).reshape(2, 2)
    assert mse(ref, test) == pytest.approx(0.1854, abs=1e-15)
    assert psnr(ref, test) == pytest.approx(10 * math.log10(100 / 0.1854), abs=1e-12)
    assert psnr(ref, test) == pytest.approx(27.32, abs=5e-3)


def test_psnr_identical_is_inf():
    x = np.random.default_rng(0).normal(size=(4, 4))
    assert psnr(x, x) == math.inf


def test_psnr_bad_range():
    with pytest.raises(ParameterError):
        psnr(np.zeros(3), np.ones(3), data_range=0)


def test_mse_with_mask_and_shape_check():
    a, b = np.zeros((2, 2)), np.array([[1.0, 3.0], [0.0, 0.0]])
    assert mse(a, b) == 2.5
    assert mse(a, b, valid=np.array([[True, False], [True, True]])) == pytest.approx(1 / 3)
    with pytest.raises(ShapeError):
        mse(np.zeros(3), np.zeros(4))


# -- SSIM ---------------------------------------------------------------------


def ssim_loops(a, b, data_range=10.0, size=7, sigma=1.5):
    """Straightforward per-window SSIM with weighted moments."""
    w = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            di, dj = i - (size - 1) / 2, j - (size - 1) / 2
            w[i, j] = math.exp(-(di * di + dj * dj) / (2 * sigma * sigma))
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for r in range(a.shape[0] - size + 1):
        for c in range(a.shape[1] - size + 1):
            pa, pb = a[r:r + size, c:c + size], b[r:r + size, c:c + size]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_loop_implementation():
    rng = np.random.default_rng(1)
    a = rng.uniform(-5, 5, (16, 14))
    b = a + rng.normal(0, 1.0, a.shape)
    assert ssim(a, b) == pytest.approx(ssim_loops(a, b), abs=1e-9)


def test_ssim_identity_is_one():
    a = np.random.default_rng(2).normal(size=(12, 12))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_window_is_normalized_gaussian():
    w = gaussian_window()
    assert w.shape == (7, 7)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    assert w[3, 3] == w.max()


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_ssim_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-5, 5, (10, 10)), rng.uniform(-5, 5, (10, 10))
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_shift_is_worse_than_identity():
    a = np.random.default_rng(3).normal(size=(20, 20))
    assert ssim(a, np.roll(a, 3, axis=0)) < 0.5


def test_ssim_errors():
    with pytest.raises(ShapeError):
        ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ParameterError):
        ssim(np.zeros((9, 9)), np.zeros((9, 9)), window=4)


# -- FID ----------------------------------------------------------------------


def identity_features(images):
    return np.asarray(images, dtype=float).reshape(len(images), -1)


def test_fid_hand_computed_stub():
    # features [-1, 1] vs [2, 4]: mean gap 3, both sample variances 2
    a = np.array([[-1.0], [1.0]])
    b = np.array([[2.0], [4.0]])
    assert fid(a, b, identity_features) == pytest.approx(9.0, abs=1e-9)


def test_frechet_symmetric_and_zero_on_self():
    rng = np.random.default_rng(4)
    f1 = rng.normal(size=(200, 5))
    f2 = rng.normal(0.5, 2.0, size=(200, 5))
    mu1, c1 = f1.mean(0), np.cov(f1, rowvar=False)
    mu2, c2 = f2.mean(0), np.cov(f2, rowvar=False)
    assert frechet_distance(mu1, c1, mu2, c2) == pytest.approx(frechet_distance(mu2, c2, mu1, c1), rel=1e-9)
    assert frechet_distance(mu1, c1, mu1, c1) <= 1e-6


def test_fid_same_set_near_zero():
    imgs = np.random.default_rng(5).normal(size=(40, 16, 16))
    assert fid(imgs, imgs) <= 1e-6


def test_fid_separates_distributions():
    rng = np.random.default_rng(6)
    smooth = np.cumsum(rng.normal(size=(40, 16, 16)), axis=1) / 4
    noise = rng.normal(size=(40, 16, 16))
    assert fid(smooth, noise) > fid(noise[:20], noise[20:])


def test_feature_extractor_is_frozen():
    x = np.random.default_rng(7).normal(size=(3, 16, 16))
    a, b = RandomConvFeatures()(x), RandomConvFeatures()(x)
    assert a.shape == (3, 64)
    np.testing.assert_array_equal(a, b)


def test_fid_empty():
    with pytest.raises(ParameterError):
        fid(np.zeros((0, 8, 8)), np.zeros((2, 8, 8)))


# -- spectral fidelity -------------------------------------------------------------


def test_spectral_identity_is_one():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(1024, 4))
    f = TimeHeightField(v, np.ones_like(v), 15.0)
    res = spectral_fidelity(f, f, f_cut_hz=0.01)
    assert res.fidelity == 1.0
    assert res.n_bins > 0 and len(res.pairs) == 4


def test_squared_psd_stub_is_zero():
    freqs = np.linspace(0, 0.02, 41)
    p_raw = np.full(41, 0.01)
    ok, inc, exc = fidelity_counts(freqs, p_raw, p_raw**2, f_cut_hz=0.01, tol=0.5)
    assert (ok, inc, exc) == (0, 20, 0)


def test_unit_psd_bins_excluded():
    freqs = np.array([0.0, 0.001, 0.002, 0.003])
    p_raw = np.array([5.0, 1.0, np.nan, 0.1])
    ok, inc, exc = fidelity_counts(freqs, p_raw, p_raw, f_cut_hz=0.01)
    assert (ok, inc, exc) == (1, 1, 2)


def test_white_noise_parseval():
    rng = np.random.default_rng(9)
    x = rng.normal(0, 2.0, 2**16)
    f, p = welch_psd(x, 15.0)
    area = np.sum(p) * (f[1] - f[0])
    assert area == pytest.approx(np.var(x), rel=0.02)


def test_spectral_needs_time_step():
    v = np.zeros((512, 2))
    with pytest.raises(MetadataError):
        spectral_fidelity(v, v)


def test_cutoff_below_first_bin():
    v = np.random.default_rng(0).normal(size=(512, 1))
    f = TimeHeightField(v, np.ones_like(v), 15.0)
    with pytest.raises(ParameterError):
        spectral_fidelity(f, f, f_cut_hz=1e-5)


def test_smoothing_loses_fidelity_against_identity():
    rng = np.random.default_rng(10)
    v = rng.normal(size=(2048, 2))
    raw = TimeHeightField(v, np.ones_like(v), 15.0)
    flat = TimeHeightField(np.full_like(v, 1e-3) + 1e-4 * rng.normal(size=v.shape), np.ones_like(v), 15.0)
    assert spectral_fidelity(raw, flat).fidelity < 1.0


# -- uncertainty calibration --------------------------------------------------------


def test_perfect_predictor():
    rng = np.random.default_rng(11)
    sig = rng.random(1000)
    rep = uncertainty_diagnostics(sig, sig, np.repeat(np.arange(10), 100))
    assert rep.pearson_global == pytest.approx(1.0, abs=1e-12)
    assert rep.spearman_global == pytest.approx(1.0, abs=1e-12)
    assert rep.pearson_per_patch_mean == pytest.approx(1.0, abs=1e-12)
    assert rep.pearson_per_patch_std == pytest.approx(0.0, abs=1e-12)
    assert all(a < b for a, b in zip(rep.decile_mae, rep.decile_mae[1:]))


def test_independent_null():
    rng = np.random.default_rng(12)
    rep = uncertainty_diagnostics(rng.random(1_000_000), rng.random(1_000_000))
    assert abs(rep.pearson_global) < 0.05
    assert abs(rep.spearman_global) < 0.05
    assert rep.topk_error_capture[10] == pytest.approx(0.10, abs=0.01)


def test_deciles_partition_pixels():
    rng = np.random.default_rng(13)
    rep = uncertainty_diagnostics(rng.random(1003), rng.random(1003))
    assert sum(rep.decile_counts) == 1003
    assert max(rep.decile_counts) - min(rep.decile_counts) <= 1


def test_spearman_is_pearson_of_ranks():
    rng = np.random.default_rng(14)
    e, s = rng.exponential(size=500), rng.exponential(size=500)
    rep = uncertainty_diagnostics(e, s)
    expected = np.corrcoef(stats.rankdata(s), stats.rankdata(e))[0, 1]
    assert rep.spearman_global == pytest.approx(expected, abs=1e-12)


def test_constant_sigma_patch_is_excluded():
    err = np.array([0.1, 0.2, 0.3, 0.1, 0.5, 0.9])
    sig = np.array([1.0, 1.0, 1.0, 0.1, 0.2, 0.3])
    rep = uncertainty_diagnostics(err, sig, np.array([0, 0, 0, 1, 1, 1]))
    assert rep.n_patches_excluded == 1
    assert math.isfinite(rep.pearson_per_patch_mean)


def test_topk_capture_hand_case():
    err = np.array([4.0, 3.0, 2.0, 1.0] * 25)
    sig = np.array([4.0, 3.0, 2.0, 1.0] * 25)
    rep = uncertainty_diagnostics(err, sig)
    assert rep.topk_error_capture[20] == pytest.approx(80 / 250)


def test_calibration_shape_errors():
    with pytest.raises(ShapeError):
        uncertainty_diagnostics(np.zeros(3), np.zeros(4))
    with pytest.raises(ParameterError):
        uncertainty_diagnostics(np.zeros(0), np.zeros(0))


# -- report -------------------------------------------------------------------


def test_report_row_formats_inf():
    row = MetricsReport("oracle", math.inf, 1.0, 0.0, 0.0, 1.0).table_row()
    assert row == ["oracle", "inf", "1.0", "0.0", "0.0", "1.0"]
