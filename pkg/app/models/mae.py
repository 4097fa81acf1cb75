"""
Masked autoencoder around the 3D ViT encoder: lightweight transformer decoder,
per-patch target normalisation and the masked-only reconstruction loss.
"""
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.core.positional import position_tensor
from app.core.volume import patchify_tensor
from app.models.encoder import (
    LatentSequence,
    ViTEncoder3D,
    init_transformer_weights,
    random_mask_batch,
    transformer_block,
)
from app.schemas.model import MAEDecoderConfig
from app.utils.exceptions import ConfigError, ShapeError

PIXEL_NORM_EPS = 1e-6


def normalize_patch_targets(raw_patches, eps: float = PIXEL_NORM_EPS):
    """Per-patch standardisation with population variance; constant patches map to zeros"""
    if isinstance(raw_patches, np.ndarray):
        x = raw_patches.astype(np.float64)
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mean) / np.sqrt(var + eps)
    mean = raw_patches.mean(dim=-1, keepdim=True)
    var = raw_patches.var(dim=-1, keepdim=True, unbiased=False)
    return (raw_patches - mean) / (var + eps) ** 0.5


def mae_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MSE over masked tokens only: sum of squared errors / (n_masked * p^3)"""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if mask.shape != pred.shape[:-1]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match tokens {tuple(pred.shape[:-1])}")
    n_masked = mask.sum()
    if n_masked.item() < 1:
        raise ConfigError("reconstruction loss is undefined without masked tokens")
    per_token = ((pred - target) ** 2).mean(dim=-1)
    return (per_token * mask).sum() / n_masked


class MAEDecoder3D(nn.Module):
    """Transformer decoder predicting p^3 values per token; contains no convolutions"""

    def __init__(self, encoder_dim: int, cfg: MAEDecoderConfig, patch_size: int):
        super().__init__()
        if cfg.embed_dim is None:
            raise ConfigError("MAE decoder config must be resolved against its encoder first")
        self.cfg = cfg
        self.embed_dim = cfg.embed_dim
        self.patch_size = patch_size
        self.decoder_embed = nn.Linear(encoder_dim, cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [transformer_block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        self.pred = nn.Linear(cfg.embed_dim, patch_size ** 3)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        self.apply(init_transformer_weights)
        torch.nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, latent: LatentSequence, stages: Optional[list] = None) -> torch.Tensor:
        """(B, N_vis, D) latent -> (B, N, p^3) per-token predictions in token order.

        When `stages` is a list, each decoder block output is appended to it.
        """
        x = self.decoder_embed(latent.states)
        n = latent.num_tokens
        if latent.visible_indices is not None:
            b = x.shape[0]
            full = self.mask_token.expand(b, n, -1).clone()
            index = latent.visible_indices.unsqueeze(-1).expand(-1, -1, self.embed_dim)
            x = full.scatter(1, index, x)
        elif x.shape[1] != n:
            raise ShapeError(
                f"{x.shape[1]} tokens given for a grid of {n}",
                details={"tokens": int(x.shape[1]), "grid_dims": list(latent.grid_dims)},
            )
        x = x + position_tensor(latent.grid_dims, self.embed_dim, device=x.device).to(x.dtype)
        for blk in self.blocks:
            x = blk(x)
            if stages is not None:
                stages.append(x)
        return self.pred(self.norm(x))


@dataclass
class MAEOutput:
    loss: torch.Tensor
    pred: torch.Tensor       # (B, N, p^3)
    target: torch.Tensor     # (B, N, p^3), normalised if pixel_norm
    mask: torch.Tensor       # (B, N), 1 = masked


class MaskedAutoencoder3D(nn.Module):
    def __init__(self, encoder: ViTEncoder3D, decoder_cfg: MAEDecoderConfig, pixel_norm: bool = True):
        super().__init__()
        self.encoder = encoder
        resolved = decoder_cfg.resolve(encoder.cfg)
        self.decoder = MAEDecoder3D(encoder.embed_dim, resolved, encoder.patch_size)
        self.pixel_norm = pixel_norm

    @property
    def patch_size(self) -> int:
        return self.encoder.patch_size

    def forward(
        self,
        volumes: torch.Tensor,
        mask_ratio: float,
        generator: torch.Generator,
    ) -> MAEOutput:
        """volumes: standardised (B, 1, X, Y, Z)"""
        p = self.patch_size
        grid_dims = tuple(s // p for s in volumes.shape[2:])
        patches = patchify_tensor(volumes, p)
        ids_keep, mask = random_mask_batch(
            patches.shape[0], patches.shape[1], mask_ratio, generator, device=volumes.device
        )
        latent = self.encoder(patches, grid_dims, visible_indices=ids_keep)
        pred = self.decoder(latent)
        target = normalize_patch_targets(patches) if self.pixel_norm else patches
        return MAEOutput(loss=mae_loss(pred, target, mask), pred=pred, target=target, mask=mask)

    @torch.no_grad()
    def reconstruct(
        self, volumes: torch.Tensor, mask_ratio: float, generator: torch.Generator
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        out = self.forward(volumes, mask_ratio, generator)
        return out.pred, out.target, out.mask
