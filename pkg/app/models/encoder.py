"""
3D ViT encoder over raw-voxel patch tokens, plus random token masking.
"""
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
from timm.models.vision_transformer import Block

from app.core.positional import position_tensor
from app.schemas.model import EncoderConfig, MaskingSpec
from app.utils.exceptions import ConfigError, ShapeError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("encoder")


@dataclass
class LatentSequence:
    states: torch.Tensor                      # (B, N_vis, D), final-norm output
    grid_dims: Tuple[int, int, int]
    visible_indices: Optional[torch.Tensor] = None   # (B, N_vis); None means all tokens, identity order
    hidden: Dict[int, torch.Tensor] = field(default_factory=dict)  # block index -> (B, N_vis, D)

    @property
    def num_tokens(self) -> int:
        gx, gy, gz = self.grid_dims
        return gx * gy * gz


def visible_count(num_tokens: int, ratio: float) -> int:
    """floor(N * (1 - ratio)), evaluated on the decimal value of ratio"""
    keep = Fraction(num_tokens) * (1 - Fraction(str(ratio)))
    return math.floor(keep)


def _check_ratio(num_tokens: int, ratio: float) -> int:
    if num_tokens < 1:
        raise ConfigError("token count must be >= 1", details={"num_tokens": num_tokens})
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1)", details={"ratio": ratio})
    n_vis = visible_count(num_tokens, ratio)
    if n_vis < 1:
        raise ConfigError(
            f"mask ratio {ratio} leaves no visible token out of {num_tokens}",
            details={"ratio": ratio, "num_tokens": num_tokens},
        )
    return n_vis


def random_mask(num_tokens: int, spec: MaskingSpec) -> Tuple[torch.Tensor, torch.Tensor]:
    """Uniform masking without replacement; returns (sorted visible indices, mask with 1 = masked)"""
    n_vis = _check_ratio(num_tokens, spec.ratio)
    gen = torch.Generator().manual_seed(spec.rng_seed)
    perm = torch.randperm(num_tokens, generator=gen)
    visible = perm[:n_vis].sort().values
    mask = torch.ones(num_tokens)
    mask[visible] = 0.0
    return visible, mask


def random_mask_batch(
    batch_size: int, num_tokens: int, ratio: float, generator: torch.Generator, device=None
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sample masking for a batch; (B, N_vis) visible indices and (B, N) mask"""
    n_vis = _check_ratio(num_tokens, ratio)
    noise = torch.rand(batch_size, num_tokens, generator=generator)
    ids_keep = noise.argsort(dim=1)[:, :n_vis].sort(dim=1).values
    mask = torch.ones(batch_size, num_tokens)
    mask.scatter_(1, ids_keep, 0.0)
    return ids_keep.to(device), mask.to(device)


def transformer_block(dim: int, num_heads: int, mlp_ratio: float) -> Block:
    return Block(dim, num_heads, mlp_ratio, qkv_bias=True, norm_layer=partial(nn.LayerNorm, eps=1e-6))


def init_transformer_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        torch.nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.constant_(module.bias, 0)
    elif isinstance(module, nn.LayerNorm):
        nn.init.constant_(module.bias, 0)
        nn.init.constant_(module.weight, 1.0)


class ViTEncoder3D(nn.Module):
    """Pre-norm transformer over linearly embedded p^3 tokens; no class token"""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_size = cfg.patch_size
        self.embed_dim = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_size ** 3, cfg.embed_dim)
        self.blocks = nn.ModuleList(
            [transformer_block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim, eps=1e-6)
        self.apply(init_transformer_weights)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def embed(self, patches: torch.Tensor, grid_dims: Tuple[int, int, int]) -> torch.Tensor:
        """(B, N, p^3) raw tokens -> (B, N, D) embeddings with positions added"""
        if patches.shape[-1] != self.patch_size ** 3:
            raise ShapeError(
                f"token length {patches.shape[-1]} != {self.patch_size ** 3} for patch size {self.patch_size}"
            )
        x = self.patch_embed(patches)
        return x + position_tensor(grid_dims, self.embed_dim, device=x.device).to(x.dtype)

    def encode(
        self,
        x: torch.Tensor,
        grid_dims: Tuple[int, int, int],
        keep_hidden: Iterable[int] = (),
        visible_indices: Optional[torch.Tensor] = None,
    ) -> LatentSequence:
        """Run the transformer on already-embedded (and possibly masked) tokens"""
        if x.shape[-1] != self.embed_dim:
            raise ShapeError(
                f"token embedding dim {x.shape[-1]} != encoder embed_dim {self.embed_dim}",
                details={"got": int(x.shape[-1]), "expected": self.embed_dim},
            )
        keep = set(keep_hidden)
        bad = [k for k in keep if not 0 <= k < self.depth]
        if bad:
            raise ConfigError(f"hidden-state taps {bad} outside encoder depth {self.depth}")
        hidden: Dict[int, torch.Tensor] = {}
        for idx, blk in enumerate(self.blocks):
            x = blk(x)
            if idx in keep:
                hidden[idx] = x
        return LatentSequence(
            states=self.norm(x), grid_dims=tuple(grid_dims), visible_indices=visible_indices, hidden=hidden
        )

    def forward(
        self,
        patches: torch.Tensor,
        grid_dims: Tuple[int, int, int],
        visible_indices: Optional[torch.Tensor] = None,
        keep_hidden: Sequence[int] = (),
    ) -> LatentSequence:
        x = self.embed(patches, grid_dims)
        # positions are added to every token before masked ones are dropped
        if visible_indices is not None:
            x = torch.gather(x, 1, visible_indices.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
        return self.encode(x, grid_dims, keep_hidden=keep_hidden, visible_indices=visible_indices)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_encoder(cfg: Union[EncoderConfig, str], init_seed: int = 0, patch_size: int = 8) -> ViTEncoder3D:
    """Reproducible encoder construction; a string selects a preset from the size table"""
    if isinstance(cfg, str):
        cfg = EncoderConfig.from_name(cfg, patch_size=patch_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        encoder = ViTEncoder3D(cfg)
    logger.info(
        f"[encoder] built {cfg.name} p={cfg.patch_size} D={cfg.embed_dim} depth={cfg.depth} "
        f"heads={cfg.num_heads} params={count_parameters(encoder):,}"
    )
    return encoder
