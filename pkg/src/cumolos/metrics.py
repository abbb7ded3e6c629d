"""Evaluation metrics: image quality, FID, spectral fidelity, uncertainty calibration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg, signal, stats

from .errors import MetadataError, NumericError, ParameterError, ShapeError

DEFAULT_DATA_RANGE = 10.0  # m/s, span of the clamp interval
TOPK_PERCENTS = (1, 5, 10, 20)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(reference, test, valid=None) -> float:
    a, b = _pair(reference, test)
    sq = (a - b) ** 2
    if valid is not None:
        sq = sq[np.asarray(valid, dtype=bool)]
    return float(sq.mean()) if sq.size else 0.0


def psnr(reference, test, data_range: float = DEFAULT_DATA_RANGE, valid=None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ParameterError("data_range must be positive")
    err = mse(reference, test, valid)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / err)


def gaussian_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def ssim(reference, test, data_range: float = DEFAULT_DATA_RANGE, window: int = 7, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all fully-contained Gaussian windows."""
    a, b = _pair(reference, test)
    if window % 2 == 0 or window < 1:
        raise ParameterError("SSIM window must be a positive odd integer")
    if min(a.shape) < window:
        raise ShapeError(f"images {a.shape} smaller than the SSIM window {window}")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def local(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)

    mu_a, mu_b = local(a), local(b)
    var_a = local(a * a) - mu_a**2
    var_b = local(b * b) - mu_b**2
    cov = local(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(smap.mean())


# --------------------------------------------------------------------------
# FID
# --------------------------------------------------------------------------


class RandomConvFeatures:
    """Frozen random conv feature map ("fid-rand-v1").

    Three 3x3 stride-2 convolutions with ReLU, then per-channel spatial mean
    and standard deviation of the last layer. Weights come from a fixed seed,
    so features are comparable across runs of this package only.
    """

    name = "fid-rand-v1"

    def __init__(self, channels=(8, 16, 32), seed: int = 20110615):
        rng = np.random.default_rng(seed)
        self.layers = []
        c_in = 1
        for c_out in channels:
            wgt = rng.standard_normal((c_out, c_in, 3, 3)) * math.sqrt(2.0 / (9 * c_in))
            bias = 0.1 * rng.standard_normal(c_out)
            self.layers.append((wgt, bias))
            c_in = c_out

    def __call__(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        x = x[:, None]  # (N, 1, H, W)
        for wgt, bias in self.layers:
            x = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
            win = sliding_window_view(x, (3, 3), axis=(2, 3))[:, :, ::2, ::2]
            x = np.einsum("nchwij,ocij->nohw", win, wgt) + bias[None, :, None, None]
            x = np.maximum(x, 0.0)
        return np.concatenate([x.mean(axis=(2, 3)), x.std(axis=(2, 3))], axis=1)


FEATURE_EXTRACTORS: dict[str, Callable[[], Callable]] = {"fid-rand-v1": RandomConvFeatures}


def gaussian_stats(features) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    mu = f.mean(axis=0)
    cov = np.atleast_2d(np.cov(f, rowvar=False)) if f.shape[0] > 1 else np.zeros((f.shape[1], f.shape[1]))
    return mu, cov


def frechet_distance(mu1, sigma1, mu2, sigma2, eps: float = 1e-6) -> float:
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    if not (np.all(np.isfinite(sigma1)) and np.all(np.isfinite(sigma2))):
        raise NumericError("feature covariance is not finite")
    diff = mu1 - mu2
    covmean = linalg.sqrtm(sigma1 @ sigma2)
    if not np.all(np.isfinite(covmean)):
        offset = np.eye(sigma1.shape[0]) * eps
        covmean = linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset))
    covmean = np.real(covmean)
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))
    if not math.isfinite(value):
        raise NumericError("Frechet distance is not finite")
    return max(value, 0.0)


def fid(set_a, set_b, extractor: Callable | None = None) -> float:
    """Frechet distance between Gaussian fits of extracted features."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ParameterError("FID needs two non-empty sets")
    extractor = extractor or RandomConvFeatures()
    mu_a, cov_a = gaussian_stats(extractor(np.asarray(set_a)))
    mu_b, cov_b = gaussian_stats(extractor(np.asarray(set_b)))
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


# --------------------------------------------------------------------------
# spectral fidelity
# --------------------------------------------------------------------------


@dataclass
class PsdConfig:
    nperseg: int = 256
    overlap: float = 0.5
    window: str = "hann"


@dataclass
class PsdPair:
    freqs: np.ndarray
    p_raw: np.ndarray
    p_den: np.ndarray
    gate_index: int


def welch_psd(series, time_step_s: float, config: PsdConfig | None = None):
    """One-sided Welch density estimate; returns (freqs [Hz], psd)."""
    config = config or PsdConfig()
    x = np.nan_to_num(np.asarray(series, dtype=np.float64))
    nperseg = min(config.nperseg, x.shape[-1])
    return signal.welch(x, fs=1.0 / time_step_s, window=config.window, nperseg=nperseg,
                        noverlap=int(nperseg * config.overlap), detrend="constant", scaling="density", axis=-1)


def log_ratio_error(p_raw, p_den) -> np.ndarray:
    """Relative error of log10 PSD, (log P_den - log P_raw) / log P_raw."""
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log10(p_raw)
        return (np.log10(p_den) - lr) / lr


def fidelity_counts(freqs, p_raw, p_den, f_cut_hz: float = 0.01, tol: float = 0.5, guard: float = 1e-6):
    """Counts (within_tol, included_bins, excluded_bins) over 0 < f <= f_cut."""
    freqs = np.asarray(freqs)
    sel = (freqs > 0) & (freqs <= f_cut_hz)
    p_raw = np.asarray(p_raw)[sel]
    p_den = np.asarray(p_den)[sel]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_raw = np.log10(p_raw)
    excluded = ~np.isfinite(log_raw) | (np.abs(log_raw) < guard)
    eps = log_ratio_error(p_raw, p_den)
    ok = (np.abs(eps) <= tol) & ~excluded
    return int(ok.sum()), int((~excluded).sum()), int(excluded.sum())


@dataclass
class SpectralResult:
    fidelity: float
    pairs: list[PsdPair]
    per_gate: dict[int, float]
    n_bins: int
    n_excluded: int


def spectral_fidelity(raw_field, den_field, f_cut_hz: float = 0.01, tol: float = 0.5,
                      gates: Sequence[int] | None = None, psd_config: PsdConfig | None = None) -> SpectralResult:
    """Fraction of low-frequency temporal PSD bins whose log-ratio error is
    within ``tol``, pooled over the selected gates."""
    raw = raw_field.velocity if hasattr(raw_field, "velocity") else np.asarray(raw_field)
    den = den_field.velocity if hasattr(den_field, "velocity") else np.asarray(den_field)
    if raw.shape != den.shape:
        raise ShapeError(f"field shapes differ: {raw.shape} vs {den.shape}")
    step = getattr(raw_field, "time_step_s", None)
    if step is None or not step > 0:
        raise MetadataError("spectral fidelity needs the raw field's time_step_s")
    gates = range(raw.shape[1]) if gates is None else gates

    pairs, per_gate = [], {}
    n_ok = n_bins = n_excl = 0
    for g in gates:
        f, p_raw = welch_psd(raw[:, g], step, psd_config)
        _, p_den = welch_psd(den[:, g], step, psd_config)
        if len(f) < 2 or f_cut_hz < f[1]:
            raise ParameterError(f"f_cut_hz={f_cut_hz} is below the first nonzero PSD bin")
        ok, inc, exc = fidelity_counts(f, p_raw, p_den, f_cut_hz, tol)
        n_ok, n_bins, n_excl = n_ok + ok, n_bins + inc, n_excl + exc
        per_gate[int(g)] = ok / inc if inc else float("nan")
        pairs.append(PsdPair(f, p_raw, p_den, int(g)))
    fidelity = n_ok / n_bins if n_bins else float("nan")
    return SpectralResult(fidelity, pairs, per_gate, n_bins, n_excl)


# --------------------------------------------------------------------------
# uncertainty calibration
# --------------------------------------------------------------------------


@dataclass
class CalibrationReport:
    pearson_per_patch_mean: float
    pearson_per_patch_std: float
    pearson_global: float
    spearman_global: float
    decile_mae: list[float]
    decile_counts: list[int]
    topk_error_capture: dict[int, float]
    n_patches_excluded: int = 0


def _pearson(x, y) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y) / den if den > 0 else float("nan")


def uncertainty_diagnostics(errors, sigmas, patch_ids=None, n_bins: int = 10,
                            topk_percents: Sequence[int] = TOPK_PERCENTS) -> CalibrationReport:
    """Correlation, sigma-decile MAE and top-k% error capture.

    ``errors`` are absolute reconstruction errors and ``sigmas`` the
    ensemble spread, flattened pixel stacks of equal length. Patches with
    constant sigma have no Pearson r and are counted as excluded.
    """
    err = np.abs(np.asarray(errors, dtype=np.float64)).ravel()
    sig = np.asarray(sigmas, dtype=np.float64).ravel()
    if err.shape != sig.shape:
        raise ShapeError(f"errors ({err.size}) and sigmas ({sig.size}) differ in length")
    if err.size == 0:
        raise ParameterError("no pixels to evaluate")
    ids = np.zeros(err.size, dtype=np.int64) if patch_ids is None else np.asarray(patch_ids).ravel()
    if ids.shape != err.shape:
        raise ShapeError("patch_ids must match the pixel stacks")

    per_patch = []
    excluded = 0
    for pid in np.unique(ids):
        sel = ids == pid
        s, e = sig[sel], err[sel]
        if s.size < 2 or np.all(s == s[0]) or np.all(e == e[0]):
            excluded += 1
            continue
        per_patch.append(_pearson(s, e))
    per_patch = np.asarray(per_patch)

    order = np.argsort(sig, kind="stable")
    bins = np.array_split(order, n_bins)
    decile_mae = [float(err[b].mean()) if b.size else float("nan") for b in bins]

    desc = np.argsort(-sig, kind="stable")
    total = err.sum()
    capture = {}
    for k in topk_percents:
        n_top = max(1, int(math.floor(k / 100.0 * err.size + 0.5)))
        capture[int(k)] = float(err[desc[:n_top]].sum() / total) if total > 0 else float("nan")

    return CalibrationReport(
        pearson_per_patch_mean=float(per_patch.mean()) if per_patch.size else float("nan"),
        pearson_per_patch_std=float(per_patch.std()) if per_patch.size else float("nan"),
        pearson_global=_pearson(sig, err),
        spearman_global=float(stats.spearmanr(sig, err).statistic),
        decile_mae=decile_mae,
        decile_counts=[int(b.size) for b in bins],
        topk_error_capture=capture,
        n_patches_excluded=excluded,
    )


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

TABLE_COLUMNS = ("method", "psnr_db", "ssim", "mse", "fid", "spectral_fidelity")


@dataclass
class MetricsReport:
    method: str
    psnr_db: float
    ssim: float
    mse: float
    fid: float
    spectral_fidelity: float
    data_range: float = DEFAULT_DATA_RANGE
    psd: dict = field(default_factory=lambda: asdict(PsdConfig()))
    spectral_per_gate: dict = field(default_factory=dict)
    spectral_bins: int = 0
    spectral_excluded_bins: int = 0
    fid_extractor: str = RandomConvFeatures.name
    calibration: CalibrationReport | None = None

    def table_row(self) -> list[str]:
        return [self.method] + [_fmt(getattr(self, c)) for c in TABLE_COLUMNS[1:]]

    def to_flat(self) -> dict:
        flat = {
            "method": self.method,
            "psnr_db": self.psnr_db,
            "psnr_data_range": self.data_range,
            "ssim": self.ssim,
            "mse": self.mse,
            "fid": self.fid,
            "fid_extractor": self.fid_extractor,
            "spectral_fidelity": self.spectral_fidelity,
            "spectral_bins": self.spectral_bins,
            "spectral_excluded_bins": self.spectral_excluded_bins,
        }
        for k, v in self.psd.items():
            flat[f"psd_{k}"] = v
        for g, v in sorted(self.spectral_per_gate.items()):
            flat[f"spectral_fidelity_gate_{g}"] = v
        if self.calibration is not None:
            c = self.calibration
            flat.update(
                pearson_per_patch_mean=c.pearson_per_patch_mean,
                pearson_per_patch_std=c.pearson_per_patch_std,
                pearson_global=c.pearson_global,
                spearman_global=c.spearman_global,
                calibration_patches_excluded=c.n_patches_excluded,
            )
            for i, v in enumerate(c.decile_mae):
                flat[f"decile_mae_{i}"] = v
            for k, v in c.topk_error_capture.items():
                flat[f"top{k}pct_error_capture"] = v
        return flat

    def to_kv(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_flat().items())


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)
