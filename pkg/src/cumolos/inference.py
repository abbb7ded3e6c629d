"""Monte Carlo mask-ensemble inference.

Every member re-runs the autoencoder under a fresh random token mask; the
members are reduced to a per-pixel mean and population standard deviation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ParameterError, StateError
from .field_io import VELOCITY_SCALE, PatchSample, denormalize, read_records, write_records
from .model import MaskedAutoencoder, visible_index_tensor
from .patching import from_tokens, sample_mask, to_tokens

COMPOSITIONS = ("paste-visible", "full-decode")
AGGREGATIONS = ("all", "masked-only")


@dataclass
class EnsembleResult:
    mean: np.ndarray  # (H, W) m/s
    sigma: np.ndarray  # (H, W) m/s
    n_members: int
    member_seeds: list[int] = field(default_factory=list)


def pairwise_sum(stack: np.ndarray) -> np.ndarray:
    """Sum along axis 0 by a fixed balanced binary tree."""
    n = stack.shape[0]
    if n == 1:
        return stack[0].copy()
    if n == 2:
        return stack[0] + stack[1]
    mid = n // 2
    return pairwise_sum(stack[:mid]) + pairwise_sum(stack[mid:])


def aggregate_members(members: np.ndarray, seeds: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and 1/N standard deviation of a member stack (N, H, W).

    Members are ordered by seed before the tree reduction so the result does
    not depend on the order in which they were produced.
    """
    members = np.asarray(members, dtype=np.float64)
    if members.ndim < 1 or members.shape[0] < 1:
        raise ParameterError("need at least one ensemble member")
    if seeds is not None:
        members = members[np.argsort(np.asarray(seeds), kind="stable")]
    n = members.shape[0]
    mean = pairwise_sum(members) / n
    var = pairwise_sum((members - mean) ** 2) / n
    # agreeing members (e.g. a pixel pasted in every member) must give exactly 0
    same = np.all(members == members[0], axis=0)
    mean[same] = members[0][same]
    var[same] = 0.0
    return mean, np.sqrt(var)


def aggregate_masked_only(members: np.ndarray, hidden: np.ndarray,
                          seeds: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and 1/N std over only the members in which that pixel was hidden.

    Pixels never hidden in any member fall back to all members.
    """
    members = np.asarray(members, dtype=np.float64)
    w = np.asarray(hidden, dtype=np.float64)
    if members.shape != w.shape:
        raise ParameterError(f"member stack {members.shape} and hidden maps {w.shape} differ")
    if seeds is not None:
        order = np.argsort(np.asarray(seeds), kind="stable")
        members, w = members[order], w[order]
    mean_all, sigma_all = aggregate_members(members)
    count = pairwise_sum(w)
    has = count > 0
    safe = np.where(has, count, 1.0)
    mean = pairwise_sum(w * members) / safe
    var = pairwise_sum(w * (members - mean) ** 2) / safe
    return np.where(has, mean, mean_all), np.where(has, np.sqrt(var), sigma_all)


def _check_model(model):
    if model is None or not isinstance(model, MaskedAutoencoder):
        raise StateError("inference needs a trained MaskedAutoencoder (load one from a checkpoint)")


def reconstruct_members(patch: PatchSample, model: MaskedAutoencoder, seeds: Sequence[int], *,
                        mask_ratio: float = 0.7, composition: str = "paste-visible",
                        clamp: bool = True, batch_size: int = 50, return_hidden: bool = False):
    """One physical-unit reconstruction per seed, stacked as (N, H, W).

    With ``return_hidden`` the per-member hidden-pixel maps come back too.
    """
    _check_model(model)
    if composition not in COMPOSITIONS:
        raise ParameterError(f"unknown composition {composition!r}; expected one of {COMPOSITIONS}")
    H, W = patch.shape
    gh, gw = H // 2, W // 2
    tokens = to_tokens(patch.values)
    L = tokens.shape[0]
    dtype = next(model.parameters()).dtype
    x_all = torch.as_tensor(tokens, dtype=dtype)

    out = np.empty((len(seeds), H, W))
    hidden_px = np.zeros((len(seeds), H, W), dtype=bool)
    model.eval()
    for start in range(0, len(seeds), batch_size):
        chunk = [int(s) for s in seeds[start:start + batch_size]]
        masks = [sample_mask(L, mask_ratio, s) for s in chunk]
        x = x_all.expand(len(chunk), -1, -1)
        with torch.no_grad():
            pred = model(x, visible_index_tensor(masks), (gh, gw)).cpu().numpy().astype(np.float64)
        recon = from_tokens(pred, gh, gw)
        for k, m in enumerate(masks):
            hid = from_tokens(np.repeat(m.hidden[:, None], 4, axis=1), gh, gw)
            hidden_px[start + k] = hid
            if composition == "paste-visible":
                vis_px = ~hid & patch.validity
                recon[k][vis_px] = patch.values[vis_px]
        recon = denormalize(recon)
        if clamp:
            np.clip(recon, -VELOCITY_SCALE, VELOCITY_SCALE, out=recon)
        out[start:start + len(chunk)] = recon
    if return_hidden:
        return out, hidden_px
    return out


def reconstruct_once(patch: PatchSample, model: MaskedAutoencoder, mask_seed: int, *,
                     mask_ratio: float = 0.7, composition: str = "paste-visible", clamp: bool = True) -> np.ndarray:
    """A single member reconstruction in m/s.

    Under ``paste-visible`` the valid pixels of visible tokens are copied
    from the input; ``full-decode`` uses the decoder output everywhere.
    """
    return reconstruct_members(patch, model, [mask_seed], mask_ratio=mask_ratio, composition=composition,
                               clamp=clamp)[0]


def ensemble(patch: PatchSample, model: MaskedAutoencoder, n: int = 50, base_seed: int = 0, *,
             mask_ratio: float = 0.7, composition: str = "paste-visible", clamp: bool = True,
             batch_size: int = 50, aggregation: str = "all", return_members: bool = False):
    """Mean and population std over ``n`` members with seeds ``base_seed .. base_seed + n - 1``.

    ``aggregation="all"`` uses every member at every pixel; ``"masked-only"``
    restricts each pixel to the members in which it was hidden.
    """
    if n < 1:
        raise ParameterError(f"ensemble size must be >= 1, got {n}")
    if aggregation not in AGGREGATIONS:
        raise ParameterError(f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}")
    seeds = list(range(base_seed, base_seed + n))
    members, hidden = reconstruct_members(patch, model, seeds, mask_ratio=mask_ratio, composition=composition,
                                          clamp=clamp, batch_size=batch_size, return_hidden=True)
    if aggregation == "all":
        mean, sigma = aggregate_members(members, seeds)
    else:
        mean, sigma = aggregate_masked_only(members, hidden, seeds)
    result = EnsembleResult(mean, sigma, n, seeds)
    if return_members:
        return result, members
    return result


# --------------------------------------------------------------------------
# result files
# --------------------------------------------------------------------------


def write_result(path, result: EnsembleResult, validity: np.ndarray | None = None) -> Path:
    """Two CMLS records: mean then sigma; the companion slot holds validity."""
    companion = np.ones_like(result.mean) if validity is None else validity.astype(np.float64)
    return write_records(path, [(result.mean, companion), (result.sigma, companion)])


def read_result(path, member_seeds: Sequence[int] = ()) -> tuple[EnsembleResult, np.ndarray]:
    recs = read_records(path)
    if len(recs) != 2:
        raise StateError(f"{path}: expected 2 records (mean, sigma), found {len(recs)}")
    mean, sigma = recs[0].velocity, recs[1].velocity
    return EnsembleResult(mean, sigma, len(member_seeds), list(member_seeds)), recs[0].intensity > 0.5


def write_manifest(path, entries: list[dict], **meta) -> Path:
    path = Path(path)
    path.write_text(json.dumps({**meta, "patches": entries}, indent=2, sort_keys=True) + "\n")
    return path
