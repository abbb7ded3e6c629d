"""Micro-patch masked autoencoder.

Encoder: linear token embedding, fixed 2D sin-cos positions, pre-norm ViT
blocks over the visible tokens only. Decoder: projection to a narrower
width, a shared learned mask token at hidden positions, its own fixed
positions, pre-norm blocks, and a linear head back to 2x2 pixel values.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError, ShapeError
from .patching import TOKEN_DIM, MaskRealization, TokenGrid


@dataclass
class ModelConfig:
    encoder_layers: int = 12
    decoder_layers: int = 4
    encoder_dim: int = 192
    decoder_dim: int = 96
    encoder_heads: int = 3
    decoder_heads: int = 3
    mlp_ratio: float = 4.0
    token_dim: int = TOKEN_DIM

    def validate(self) -> None:
        problems = []
        if self.encoder_dim % self.encoder_heads:
            problems.append("encoder_dim must be divisible by encoder_heads")
        if self.decoder_dim % self.decoder_heads:
            problems.append("decoder_dim must be divisible by decoder_heads")
        if self.encoder_dim % 4 or self.decoder_dim % 4:
            problems.append("2D sin-cos positions need encoder_dim and decoder_dim divisible by 4")
        if self.encoder_layers < 0 or self.decoder_layers < 0:
            problems.append("layer counts must be non-negative")
        if self.token_dim != TOKEN_DIM:
            problems.append(f"token_dim is fixed at {TOKEN_DIM} (2x2 micro-patches)")
        if problems:
            raise ParameterError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)


def sincos_pos_embed_2d(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """(grid_h*grid_w, dim) fixed embedding; half the channels encode the
    row, half the column."""
    if dim % 4:
        raise ParameterError("embedding dim must be divisible by 4")

    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64),
                             indexing="ij")
    return np.concatenate([one_axis(dim // 2, rows.ravel()), one_axis(dim // 2, cols.ravel())], axis=1)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        out = out.transpose(1, 2).reshape(B, N, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class MaskedAutoencoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        De, Dd = config.encoder_dim, config.decoder_dim
        self.patch_embed = nn.Linear(config.token_dim, De)
        self.encoder = nn.ModuleList(
            [Block(De, config.encoder_heads, config.mlp_ratio) for _ in range(config.encoder_layers)]
        )
        self.encoder_norm = nn.LayerNorm(De)
        self.decoder_embed = nn.Linear(De, Dd)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, Dd))
        self.decoder = nn.ModuleList(
            [Block(Dd, config.decoder_heads, config.mlp_ratio) for _ in range(config.decoder_layers)]
        )
        self.decoder_norm = nn.LayerNorm(Dd)
        self.head = nn.Linear(Dd, config.token_dim)
        # set to a dict to record internal sequence lengths on each forward
        self.trace: dict | None = None
        self._pos_cache: dict = {}
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.mask_token, std=0.02)

    def pos_embed(self, dim, grid_h, grid_w, like: torch.Tensor) -> torch.Tensor:
        key = (dim, grid_h, grid_w, like.dtype, like.device)
        if key not in self._pos_cache:
            pe = sincos_pos_embed_2d(dim, grid_h, grid_w)
            self._pos_cache[key] = torch.as_tensor(pe, dtype=like.dtype, device=like.device)
        return self._pos_cache[key]

    def encode(self, tokens: torch.Tensor, visible_idx: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
        """Encode the tokens at ``visible_idx`` (B, n_vis); output follows that order."""
        pe = self.pos_embed(self.config.encoder_dim, *grid_hw, like=tokens)
        vis = torch.gather(tokens, 1, visible_idx[..., None].expand(-1, -1, tokens.shape[-1]))
        x = self.patch_embed(vis) + pe[visible_idx]
        if self.trace is not None:
            self.trace["encoder_tokens"] = x.shape[1]
        for blk in self.encoder:
            x = blk(x)
        return self.encoder_norm(x)

    def decode(self, latent: torch.Tensor, visible_idx: torch.Tensor, L: int, grid_hw: tuple[int, int]) -> torch.Tensor:
        B = latent.shape[0]
        y = self.decoder_embed(latent)
        full = self.mask_token.expand(B, L, -1).clone()
        full = full.scatter(1, visible_idx[..., None].expand(-1, -1, y.shape[-1]), y)
        x = full + self.pos_embed(self.config.decoder_dim, *grid_hw, like=latent)
        if self.trace is not None:
            self.trace["decoder_tokens"] = x.shape[1]
        for blk in self.decoder:
            x = blk(x)
        return self.head(self.decoder_norm(x))

    def forward(self, tokens: torch.Tensor, visible_idx: torch.Tensor, grid_hw: tuple[int, int]) -> torch.Tensor:
        """tokens (B, L, 4), visible_idx (B, n_vis) long -> predictions (B, L, 4)."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.config.token_dim:
            raise ShapeError(f"tokens must be (B, L, {self.config.token_dim}), got {tuple(tokens.shape)}")
        L = tokens.shape[1]
        if grid_hw[0] * grid_hw[1] != L:
            raise ShapeError(f"grid {grid_hw} does not match L={L}")
        if visible_idx.ndim != 2 or visible_idx.shape[0] != tokens.shape[0]:
            raise ShapeError("visible_idx must be (B, n_visible)")
        latent = self.encode(tokens, visible_idx, grid_hw)
        return self.decode(latent, visible_idx, L, grid_hw)


@dataclass
class ReconstructionOutput:
    predicted_tokens: np.ndarray  # (L, 4)
    mask: MaskRealization


def visible_index_tensor(masks, device=None) -> torch.Tensor:
    """Stack per-sample masks (all with the same visible count) into (B, n_vis)."""
    idx = [np.flatnonzero(m.visible if isinstance(m, MaskRealization) else m) for m in masks]
    counts = {len(i) for i in idx}
    if len(counts) != 1:
        raise ShapeError(f"masks in a batch must share the visible count, got {sorted(counts)}")
    return torch.as_tensor(np.stack(idx), dtype=torch.long, device=device)


def forward(grid: TokenGrid, mask: MaskRealization, model: MaskedAutoencoder) -> ReconstructionOutput:
    """Single-sample convenience wrapper around :class:`MaskedAutoencoder`."""
    if mask.visible.shape[0] != grid.L:
        raise ShapeError(f"mask length {mask.visible.shape[0]} != token count {grid.L}")
    param = next(model.parameters())
    tokens = torch.as_tensor(grid.tokens, dtype=param.dtype)[None]
    with torch.no_grad():
        pred = model(tokens, visible_index_tensor([mask]), (grid.grid_h, grid.grid_w))
    return ReconstructionOutput(pred[0].cpu().numpy().astype(np.float64), mask)


def masked_mse(pred, target, hidden, validity=None):
    """MSE over pixel entries that are in hidden tokens and valid.

    Works on torch tensors (differentiable) or numpy arrays. ``hidden`` has
    shape (..., L); ``validity`` matches ``pred``. Returns 0 when nothing
    qualifies.
    """
    if isinstance(pred, torch.Tensor):
        hidden = torch.as_tensor(hidden, device=pred.device)
        weight = hidden[..., None].to(pred.dtype).expand_as(pred)
        if validity is not None:
            weight = weight * torch.as_tensor(validity, device=pred.device).to(pred.dtype)
        count = weight.sum()
        sq = (pred - torch.as_tensor(target, dtype=pred.dtype, device=pred.device)) ** 2
        total = (sq * weight).sum()
        return total / count.clamp_min(1.0)
    pred = np.asarray(pred, dtype=np.float64)
    weight = np.broadcast_to(np.asarray(hidden, dtype=bool)[..., None], pred.shape)
    if validity is not None:
        weight = weight & np.asarray(validity, dtype=bool)
    n = weight.sum()
    if n == 0:
        return 0.0
    return float(((pred - np.asarray(target)) ** 2)[weight].sum() / n)


def masked_mse_output(output: ReconstructionOutput, target: TokenGrid, validity=None) -> float:
    return masked_mse(output.predicted_tokens, target.tokens, output.mask.hidden, validity)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    config.validate()

    def linear(i, o):
        return i * o + o

    def block(d):
        hidden = int(d * config.mlp_ratio)
        return 2 * (2 * d) + linear(d, 3 * d) + linear(d, d) + linear(d, hidden) + linear(hidden, d)

    De, Dd = config.encoder_dim, config.decoder_dim
    n = linear(config.token_dim, De) + config.encoder_layers * block(De) + 2 * De
    n += linear(De, Dd) + Dd + config.decoder_layers * block(Dd) + 2 * Dd
    n += linear(Dd, config.token_dim)
    return n


def param_summary(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


__all__ = [
    "ModelConfig",
    "MaskedAutoencoder",
    "ReconstructionOutput",
    "count_parameters",
    "forward",
    "masked_mse",
    "masked_mse_output",
    "sincos_pos_embed_2d",
    "visible_index_tensor",
]
