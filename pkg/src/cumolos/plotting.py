"""Static figure panels: per-gate log-PSD, original field, reconstruction,
uncertainty map, and training loss curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (5.0, 4.0)
DPI = 100


def _extent(shape, time_step_s, gate_spacing_m):
    T, G = shape
    return [0.0, T * time_step_s / 60.0, 0.0, G * gate_spacing_m / 1000.0]


def _save(fig, path, meta):
    fig.savefig(path, dpi=DPI, metadata={k: str(v) for k, v in meta.items()})
    plt.close(fig)
    return Path(path)


def plot_field(array, path, *, title, time_step_s, gate_spacing_m=30.0, cmap="RdBu_r", vmin=-5.0, vmax=5.0,
               label="w [m/s]"):
    """Time-height image: time along x (minutes), altitude along y (km)."""
    extent = _extent(np.shape(array), time_step_s, gate_spacing_m)
    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(np.asarray(array).T, origin="lower", aspect="auto", extent=extent, cmap=cmap, vmin=vmin,
                   vmax=vmax)
    ax.set_xlabel("time [min]")
    ax.set_ylabel("height [km]")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=label)
    fig.tight_layout()
    return _save(fig, path, {"Title": title, "Description": f"extent={extent}"})


def plot_psd(freqs, p_raw_by_gate, p_den_by_gate, gates, path, f_cut_hz=None):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    colors = plt.cm.viridis(np.linspace(0, 0.9, max(len(gates), 1)))
    for c, g, pr, pd in zip(colors, gates, p_raw_by_gate, p_den_by_gate):
        ax.loglog(freqs[1:], pr[1:], color=c, lw=1.2, label=f"gate {g} raw")
        ax.loglog(freqs[1:], pd[1:], color=c, lw=1.0, ls="--", label=f"gate {g} recon")
    if f_cut_hz:
        ax.axvline(f_cut_hz, color="k", lw=0.8, ls=":")
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("PSD [(m/s)^2/Hz]")
    ax.set_title("log-PSD at selected gates")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _save(fig, path, {"Title": "psd"})


def plot_loss_curves(logs: Sequence[tuple[str, Sequence[int], Sequence[float]]], path):
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for label, epochs, losses in logs:
        ax.plot(epochs, losses, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean masked MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path, {"Title": "loss curves"})
