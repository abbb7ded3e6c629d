"""Reference reconstructors compared against the autoencoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError

# boundary policy name -> scipy.ndimage mode
_BOUNDARY_MODES = {"reflect": "mirror", "nearest": "nearest", "wrap": "wrap", "constant": "constant"}


@dataclass
class FilterConfig:
    kernel_t: int = 8
    kernel_g: int = 8
    boundary: str = "reflect"


def mean_filter(patch, config: FilterConfig | None = None, validity=None) -> np.ndarray:
    """Sliding-window mean over valid pixels only.

    ``reflect`` mirrors about the edge pixel without repeating it. Even
    kernels cover offsets [-k//2, k//2 - 1]. Windows with no valid pixel
    give 0. Output has the units of the input values.
    """
    config = config or FilterConfig()
    if hasattr(patch, "values"):
        values, validity = patch.values, patch.validity
    else:
        values = np.asarray(patch, dtype=np.float64)
        validity = np.ones(values.shape, dtype=bool) if validity is None else np.asarray(validity, dtype=bool)
    if config.kernel_t < 1 or config.kernel_g < 1:
        raise ParameterError("kernel sizes must be positive")
    H, W = values.shape
    if config.kernel_t > H or config.kernel_g > W:
        raise ParameterError(f"kernel {config.kernel_t}x{config.kernel_g} larger than patch {H}x{W}")
    try:
        mode = _BOUNDARY_MODES[config.boundary]
    except KeyError:
        raise ParameterError(f"unknown boundary policy {config.boundary!r}") from None

    w = validity.astype(np.float64)
    kernel = np.ones((config.kernel_t, config.kernel_g))
    num = ndimage.correlate(np.where(validity, values, 0.0), kernel, mode=mode)
    den = ndimage.correlate(w, kernel, mode=mode)
    out = np.zeros_like(num)
    has = den > 0.5
    out[has] = num[has] / den[has]
    return out


def meanfilter8(patch) -> np.ndarray:
    return mean_filter(patch, FilterConfig(8, 8, "reflect"))


RECONSTRUCTORS = {"meanfilter8": meanfilter8}
