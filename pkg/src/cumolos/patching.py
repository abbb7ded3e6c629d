"""Micro-patch tokenization, random token masks and the mask-ratio curriculum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

MICRO = 2  # micro-patch edge in pixels
TOKEN_DIM = MICRO * MICRO


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (L, 4)
    grid_h: int
    grid_w: int

    @property
    def L(self) -> int:
        return self.tokens.shape[0]


@dataclass
class MaskRealization:
    visible: np.ndarray  # (L,) bool, True = shown to the encoder
    ratio: float
    seed: int

    @property
    def hidden(self) -> np.ndarray:
        return ~self.visible

    @property
    def visible_idx(self) -> np.ndarray:
        return np.flatnonzero(self.visible)


@dataclass
class CurriculumSchedule:
    enabled: bool = True
    r_start: float = 0.5
    r_end: float = 0.7
    hold_epochs: int = 5
    ramp_end_epoch: int = 30

    def validate(self) -> None:
        if not (0.0 <= self.r_start <= self.r_end < 1.0):
            raise ParameterError(f"need 0 <= r_start <= r_end < 1, got {self.r_start}, {self.r_end}")
        if not (0 <= self.hold_epochs < self.ramp_end_epoch):
            raise ParameterError(
                f"need 0 <= hold_epochs < ramp_end_epoch, got {self.hold_epochs}, {self.ramp_end_epoch}"
            )


def to_tokens(values: np.ndarray) -> np.ndarray:
    """(..., H, W) -> (..., L, 4) in row-major micro-patch order.

    Within a token the pixel order is (0,0), (0,1), (1,0), (1,1).
    """
    *lead, H, W = values.shape
    if H % MICRO or W % MICRO:
        raise ShapeError(f"patch dims must be even, got {H}x{W}")
    gh, gw = H // MICRO, W // MICRO
    x = values.reshape(*lead, gh, MICRO, gw, MICRO)
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, 2, 2)
    return x.reshape(*lead, gh * gw, TOKEN_DIM)


def from_tokens(tokens: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    *lead, L, d = tokens.shape
    if L != grid_h * grid_w or d != TOKEN_DIM:
        raise ShapeError(f"token array {tokens.shape} inconsistent with grid {grid_h}x{grid_w}")
    x = tokens.reshape(*lead, grid_h, grid_w, MICRO, MICRO)
    x = np.moveaxis(x, -2, -3)  # (..., gh, 2, gw, 2)
    return x.reshape(*lead, grid_h * MICRO, grid_w * MICRO)


def tokenize(patch) -> TokenGrid:
    values = patch.values if hasattr(patch, "values") else np.asarray(patch)
    if values.ndim != 2:
        raise ShapeError(f"expected a 2D patch, got shape {values.shape}")
    H, W = values.shape
    return TokenGrid(to_tokens(values), H // MICRO, W // MICRO)


def untokenize(grid: TokenGrid) -> np.ndarray:
    return from_tokens(grid.tokens, grid.grid_h, grid.grid_w)


def hidden_count(L: int, ratio: float) -> int:
    # round half away from zero; ratio*L is non-negative here
    return int(math.floor(ratio * L + 0.5))


def sample_mask(L: int, ratio: float, seed: int) -> MaskRealization:
    """Hide exactly ``hidden_count(L, ratio)`` tokens chosen by a seeded shuffle."""
    if L < 1:
        raise ParameterError(f"L must be >= 1, got {L}")
    if not (0.0 <= ratio < 1.0):
        raise ParameterError(f"mask ratio must lie in [0, 1), got {ratio}")
    perm = np.random.default_rng(seed).permutation(L)
    visible = np.ones(L, dtype=bool)
    visible[perm[: hidden_count(L, ratio)]] = False
    return MaskRealization(visible, float(ratio), int(seed))


def mask_ratio_at(schedule: CurriculumSchedule, epoch: int) -> float:
    """Hold ``r_start``, half-cosine ramp to ``r_end``, then hold."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    if not schedule.enabled:
        return schedule.r_end
    if epoch < schedule.hold_epochs:
        return schedule.r_start
    if epoch >= schedule.ramp_end_epoch:
        return schedule.r_end
    frac = (epoch - schedule.hold_epochs) / (schedule.ramp_end_epoch - schedule.hold_epochs)
    return schedule.r_start + (schedule.r_end - schedule.r_start) * (1.0 - math.cos(math.pi * frac)) / 2.0
