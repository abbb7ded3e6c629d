"""Scoring a set of reconstructions against held-out patches."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .errors import AlignmentError
from .field_io import VELOCITY_SCALE, PatchSample, TimeHeightField, assemble_patches, denormalize


@dataclass
class MetricsSettings:
    data_range: float = metrics.DEFAULT_DATA_RANGE
    f_cut_hz: float = 0.01
    tol: float = 0.5
    nperseg: int = 256
    overlap: float = 0.5
    window: str = "hann"
    gates: list[int] | None = None
    fid_extractor: str = "fid-rand-v1"
    ssim_window: int = 7

    @property
    def psd(self) -> metrics.PsdConfig:
        return metrics.PsdConfig(self.nperseg, self.overlap, self.window)


@dataclass
class MethodEvaluation:
    report: metrics.MetricsReport
    spectral: metrics.SpectralResult
    reconstructions: list[np.ndarray] = field(repr=False, default_factory=list)


def check_alignment(truth: Sequence[PatchSample], recons: Sequence[np.ndarray], name: str) -> None:
    if len(truth) != len(recons):
        extra = range(min(len(truth), len(recons)), max(len(truth), len(recons)))
        raise AlignmentError(f"{name}: {len(recons)} reconstructions for {len(truth)} truth patches", extra)
    bad = [i for i, (p, r) in enumerate(zip(truth, recons)) if np.shape(r) != p.shape]
    if bad:
        raise AlignmentError(f"{name}: reconstruction shape differs from truth", bad)


def _spectral_by_source(truth, truth_phys, recons, time_step_s, settings):
    groups = defaultdict(list)
    for i, p in enumerate(truth):
        groups[p.source].append(i)
    n_ok = n_bins = n_excl = 0
    gate_ok = defaultdict(float)
    gate_bins = defaultdict(int)
    pairs = []
    for src in sorted(groups):
        idx = groups[src]
        ps = [truth[i] for i in idx]
        raw = np.nan_to_num(assemble_patches(ps, [truth_phys[i] for i in idx], fill=0.0))
        den = np.nan_to_num(assemble_patches(ps, [recons[i] for i in idx], fill=0.0))
        raw_f = TimeHeightField(raw, np.ones_like(raw), time_step_s)
        den_f = TimeHeightField(den, np.ones_like(den), time_step_s)
        res = metrics.spectral_fidelity(raw_f, den_f, settings.f_cut_hz, settings.tol, settings.gates,
                                        settings.psd)
        n_ok += res.fidelity * res.n_bins if res.n_bins else 0
        n_bins += res.n_bins
        n_excl += res.n_excluded
        for pair in res.pairs:
            ok, inc, _ = metrics.fidelity_counts(pair.freqs, pair.p_raw, pair.p_den, settings.f_cut_hz, settings.tol)
            gate_ok[pair.gate_index] += ok
            gate_bins[pair.gate_index] += inc
        pairs.extend(res.pairs)
    per_gate = {g: gate_ok[g] / gate_bins[g] if gate_bins[g] else float("nan") for g in sorted(gate_bins)}
    fidelity = round(n_ok) / n_bins if n_bins else float("nan")
    return metrics.SpectralResult(fidelity, pairs, per_gate, n_bins, n_excl)


def evaluate_method(name: str, truth: Sequence[PatchSample], recons: Sequence[np.ndarray], time_step_s: float,
                    settings: MetricsSettings | None = None, sigmas: Sequence[np.ndarray] | None = None,
                    extractor=None) -> MethodEvaluation:
    """Score physical-unit reconstructions of ``truth``.

    Only valid truth pixels are scored: at SNR-rejected pixels the
    reconstruction is replaced by the truth fill before any metric runs.
    """
    settings = settings or MetricsSettings()
    check_alignment(truth, recons, name)
    if sigmas is not None:
        check_alignment(truth, sigmas, f"{name} sigma")
    truth_phys = [denormalize(p.values) for p in truth]
    scored = [np.where(p.validity, np.asarray(r, dtype=np.float64), t) for p, r, t in zip(truth, recons, truth_phys)]

    sq = np.concatenate([((s - t) ** 2)[p.validity] for p, s, t in zip(truth, scored, truth_phys)])
    mse = float(sq.mean()) if sq.size else 0.0
    psnr = float(np.mean([metrics.psnr(t, s, settings.data_range, p.validity)
                          for p, s, t in zip(truth, scored, truth_phys)]))
    ssim = float(np.mean([metrics.ssim(t, s, settings.data_range, settings.ssim_window)
                          for s, t in zip(scored, truth_phys)]))
    if extractor is None:
        extractor = metrics.FEATURE_EXTRACTORS[settings.fid_extractor]()
    fid = metrics.fid(np.stack(truth_phys) / VELOCITY_SCALE, np.stack(scored) / VELOCITY_SCALE, extractor)
    spectral = _spectral_by_source(truth, truth_phys, scored, time_step_s, settings)

    calibration = None
    if sigmas is not None:
        errs, sigs, ids = [], [], []
        for i, (p, s, t, sg) in enumerate(zip(truth, scored, truth_phys, sigmas)):
            errs.append(np.abs(s - t)[p.validity])
            sigs.append(np.asarray(sg)[p.validity])
            ids.append(np.full(int(p.validity.sum()), i))
        calibration = metrics.uncertainty_diagnostics(np.concatenate(errs), np.concatenate(sigs), np.concatenate(ids))

    report = metrics.MetricsReport(
        method=name, psnr_db=psnr, ssim=ssim, mse=mse, fid=fid, spectral_fidelity=spectral.fidelity,
        data_range=settings.data_range, psd=asdict(settings.psd), spectral_per_gate=spectral.per_gate,
        spectral_bins=spectral.n_bins, spectral_excluded_bins=spectral.n_excluded,
        fid_extractor=getattr(extractor, "name", type(extractor).__name__), calibration=calibration,
    )
    return MethodEvaluation(report, spectral, list(scored))


def evaluate_all(truth: Sequence[PatchSample], reconstructions: Mapping[str, Sequence[np.ndarray]],
                 time_step_s: float, settings: MetricsSettings | None = None,
                 sigmas: Mapping[str, Sequence[np.ndarray]] | None = None) -> dict[str, MethodEvaluation]:
    settings = settings or MetricsSettings()
    extractor = metrics.FEATURE_EXTRACTORS[settings.fid_extractor]()
    sigmas = sigmas or {}
    return {name: evaluate_method(name, truth, rec, time_step_s, settings, sigmas.get(name), extractor)
            for name, rec in reconstructions.items()}


def table_csv(reports: Sequence[metrics.MetricsReport]) -> str:
    lines = [",".join(metrics.TABLE_COLUMNS)]
    lines += [",".join(r.table_row()) for r in reports]
    return "\n".join(lines) + "\n"
