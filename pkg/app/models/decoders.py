"""
Segmentation decoders fine-tuned on top of the 3D ViT encoder.

Every decoder maps a full-length LatentSequence (plus, for UNETR, the
standardised input volume) to voxel logits of shape (B, 1, X, Y, Z). The
convolutional decoders expose their intermediate feature maps through
`run(..., stages=[])` as (name, scale, tensor) triples for feature dumps.
"""
import math
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.core.volume import tokens_to_grid, unpatchify_tensor
from app.models.encoder import LatentSequence
from app.models.mae import MAEDecoder3D
from app.models.upsampling import ConvNormAct, UpscaleStage
from app.schemas.model import DecoderKind, DecoderSpec, EncoderConfig
from app.utils.exceptions import ConfigError, ShapeError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("decoders")

Stage = Tuple[str, int, torch.Tensor]


def doubling_levels(patch_size: int) -> int:
    """log2(p); p must be a power of two >= 2"""
    if patch_size < 2 or patch_size & (patch_size - 1):
        raise ConfigError(
            f"patch_size {patch_size} must be a power of two >= 2 for convolutional decoders",
            details={"patch_size": patch_size},
        )
    return int(math.log2(patch_size))


def default_taps(depth: int) -> List[int]:
    """Blocks at 1/4, 1/2 and 3/4 of the encoder depth (0-based, deduplicated)"""
    taps = sorted({max(0, math.ceil(depth * f) - 1) for f in (0.25, 0.5, 0.75)})
    return taps


def _match(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Crop the spatial axes of x down to those of ref"""
    return x[..., : ref.shape[2], : ref.shape[3], : ref.shape[4]]


def pool_half(x: torch.Tensor) -> torch.Tensor:
    """Max-pool by 2 along every axis that has room, rounding up"""
    kernel = tuple(2 if s >= 2 else 1 for s in x.shape[2:])
    return F.max_pool3d(x, kernel_size=kernel, stride=kernel, ceil_mode=True)


class SegmentationDecoder(nn.Module):
    kind: DecoderKind
    taps: Tuple[int, ...] = ()

    def run(self, latent: LatentSequence, volume: torch.Tensor, stages: Optional[List[Stage]] = None) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, latent: LatentSequence, volume: torch.Tensor) -> torch.Tensor:
        if latent.visible_indices is not None:
            raise ShapeError("segmentation decoders need the full token sequence (no masking)")
        return self.run(latent, volume)

    @property
    def head(self) -> nn.Module:
        raise NotImplementedError

    def stage_names(self) -> List[str]:
        raise NotImplementedError


class UNETRDecoder(SegmentationDecoder):
    """U-Net decoder fusing reshaped encoder taps and a conv stem on the raw input"""

    kind = DecoderKind.UNETR

    def __init__(self, encoder_cfg: EncoderConfig, spec: DecoderSpec):
        super().__init__()
        d = encoder_cfg.embed_dim
        p = encoder_cfg.patch_size
        self.levels = levels = doubling_levels(p)
        taps = list(spec.taps) if spec.taps is not None else default_taps(encoder_cfg.depth)
        if any(t >= encoder_cfg.depth for t in taps):
            raise ConfigError(
                f"UNETR taps {taps} outside encoder depth {encoder_cfg.depth}",
                details={"taps": taps, "depth": encoder_cfg.depth},
            )
        if len(taps) < levels - 1:
            raise ConfigError(
                f"patch_size {p} needs {levels - 1} skip taps but only {len(taps)} are available",
                details={"patch_size": p, "taps": taps},
            )
        # deepest tap feeds the coarsest skip level
        self.skip_taps = tuple(reversed(taps[len(taps) - (levels - 1):])) if levels > 1 else ()
        unused = sorted(set(taps) - set(self.skip_taps))
        if unused:
            logger.debug(f"[unetr] taps {unused} not needed for patch size {p}")
        self.taps = tuple(sorted(self.skip_taps))
        ch = [spec.channels(d, level) for level in range(levels + 1)]
        self.channels = ch

        self.bottleneck = ConvNormAct(d, ch[0])
        self.skip_paths = nn.ModuleList()
        for level in range(1, levels):
            path = [UpscaleStage(d if s == 1 else ch[s - 1], ch[s], spec.upsample_mode) for s in range(1, level + 1)]
            path.append(ConvNormAct(ch[level], ch[level]))
            self.skip_paths.append(nn.Sequential(*path))
        self.stem = nn.Sequential(ConvNormAct(1, ch[levels]), ConvNormAct(ch[levels], ch[levels]))
        self.ups = nn.ModuleList(
            [UpscaleStage(ch[level - 1], ch[level], spec.upsample_mode) for level in range(1, levels + 1)]
        )
        self.fuse = nn.ModuleList([ConvNormAct(2 * ch[level], ch[level]) for level in range(1, levels + 1)])
        self.out = nn.Conv3d(ch[levels], 1, kernel_size=1)

    @property
    def head(self) -> nn.Module:
        return self.out

    def stage_names(self) -> List[str]:
        return [f"up{level}" for level in range(1, self.levels)]

    def run(self, latent, volume, stages=None):
        grid = latent.grid_dims
        missing = [t for t in self.skip_taps if t not in latent.hidden]
        if missing:
            raise ShapeError(f"encoder hidden states for taps {missing} were not captured")
        x = self.bottleneck(tokens_to_grid(latent.states, grid))
        for level in range(1, self.levels + 1):
            x = self.ups[level - 1](x)
            if level < self.levels:
                tap = self.skip_taps[level - 1]
                skip = self.skip_paths[level - 1](tokens_to_grid(latent.hidden[tap], grid))
            else:
                skip = self.stem(volume)
            x = self.fuse[level - 1](torch.cat([x, skip], dim=1))
            if stages is not None and level < self.levels:
                stages.append((f"up{level}", 2 ** level, x))
        return self.out(x)


class SFPNUNetDecoder(SegmentationDecoder):
    """Simple feature pyramid from the last encoder output with U-Net style top-down fusion"""

    kind = DecoderKind.SFPN_UNET

    def __init__(self, encoder_cfg: EncoderConfig, spec: DecoderSpec):
        super().__init__()
        d = encoder_cfg.embed_dim
        self.levels = levels = doubling_levels(encoder_cfg.patch_size)
        ch = [spec.channels(d, level) for level in range(levels + 1)]
        self.channels = ch
        mode = spec.upsample_mode

        self.lateral_quarter = ConvNormAct(d, ch[0], kernel_size=1)
        self.lateral_half = ConvNormAct(d, ch[0], kernel_size=1)
        self.lateral_one = ConvNormAct(d, ch[0], kernel_size=1)
        self.lateral_two = UpscaleStage(d, ch[1], mode)

        self.up_quarter = UpscaleStage(ch[0], ch[0], mode)
        self.fuse_half = ConvNormAct(2 * ch[0], ch[0])
        self.up_half = UpscaleStage(ch[0], ch[0], mode)
        self.fuse_one = ConvNormAct(2 * ch[0], ch[0])
        self.up_one = UpscaleStage(ch[0], ch[1], mode)
        self.fuse_two = ConvNormAct(2 * ch[1], ch[1])

        self.ups = nn.ModuleList(
            [
                nn.Sequential(UpscaleStage(ch[level - 1], ch[level], mode), ConvNormAct(ch[level], ch[level]))
                for level in range(2, levels + 1)
            ]
        )
        self.out = nn.Conv3d(ch[levels], 1, kernel_size=1)

    @property
    def head(self) -> nn.Module:
        return self.out

    def stage_names(self) -> List[str]:
        return [f"up{level}" for level in range(1, self.levels)]

    def run(self, latent, volume, stages=None):
        fmap = tokens_to_grid(latent.states, latent.grid_dims)
        half = pool_half(fmap)
        quarter = pool_half(half)
        p_quarter = self.lateral_quarter(quarter)
        p_half = self.lateral_half(half)
        p_one = self.lateral_one(fmap)
        p_two = self.lateral_two(fmap)

        x = _match(self.up_quarter(p_quarter), p_half)
        x = self.fuse_half(torch.cat([x, p_half], dim=1))
        x = _match(self.up_half(x), p_one)
        x = self.fuse_one(torch.cat([x, p_one], dim=1))
        x = self.fuse_two(torch.cat([self.up_one(x), p_two], dim=1))
        if stages is not None and self.levels > 1:
            stages.append(("up1", 2, x))
        for level, block in enumerate(self.ups, start=2):
            x = block(x)
            if stages is not None and level < self.levels:
                stages.append((f"up{level}", 2 ** level, x))
        return self.out(x)


class UpscaleDecoder(SegmentationDecoder):
    """log2(p) upscale stages from the final token grid, then a 1^3 conv to one channel"""

    kind = DecoderKind.UPSCALE

    def __init__(self, encoder_cfg: EncoderConfig, spec: DecoderSpec):
        super().__init__()
        d = encoder_cfg.embed_dim
        self.levels = levels = doubling_levels(encoder_cfg.patch_size)
        ch = [d] + [spec.channels(d, level) for level in range(1, levels + 1)]
        self.channels = ch
        self.ups = nn.ModuleList(
            [UpscaleStage(ch[level - 1], ch[level], spec.upsample_mode) for level in range(1, levels + 1)]
        )
        self.out = nn.Conv3d(ch[levels], 1, kernel_size=1)

    @property
    def head(self) -> nn.Module:
        return self.out

    def stage_names(self) -> List[str]:
        return [f"up{level}" for level in range(1, self.levels)]

    def run(self, latent, volume, stages=None):
        x = tokens_to_grid(latent.states, latent.grid_dims)
        for level, block in enumerate(self.ups, start=1):
            x = block(x)
            if stages is not None and level < self.levels:
                stages.append((f"up{level}", 2 ** level, x))
        return self.out(x)


class MAESegmentationDecoder(SegmentationDecoder):
    """The pre-training transformer decoder with fresh weights, predicting p^3 logits per token"""

    kind = DecoderKind.MAE_DEC

    def __init__(self, encoder_cfg: EncoderConfig, spec: DecoderSpec):
        super().__init__()
        resolved = spec.mae_decoder.resolve(encoder_cfg, enforce_lightweight=False)
        self.patch_size = encoder_cfg.patch_size
        self.decoder = MAEDecoder3D(encoder_cfg.embed_dim, resolved, encoder_cfg.patch_size)

    @property
    def head(self) -> nn.Module:
        return self.decoder.pred

    def stage_names(self) -> List[str]:
        return [f"block{i}" for i in range(len(self.decoder.blocks))]

    def run(self, latent, volume, stages=None):
        block_outputs: Optional[list] = [] if stages is not None else None
        logits = self.decoder(latent, stages=block_outputs)
        if stages is not None:
            for i, tokens in enumerate(block_outputs):
                stages.append((f"block{i}", 1, tokens_to_grid(tokens, latent.grid_dims)))
        return unpatchify_tensor(logits, latent.grid_dims, self.patch_size)


DECODERS = {
    DecoderKind.UNETR: UNETRDecoder,
    DecoderKind.SFPN_UNET: SFPNUNetDecoder,
    DecoderKind.UPSCALE: UpscaleDecoder,
    DecoderKind.MAE_DEC: MAESegmentationDecoder,
}


def build_decoder(encoder_cfg: EncoderConfig, spec: DecoderSpec) -> SegmentationDecoder:
    return DECODERS[DecoderKind(spec.kind)](encoder_cfg, spec)


def convolution_parameters(module: nn.Module) -> List[str]:
    """Names of parameters owned by convolution layers (or shaped like conv kernels)"""
    names = []
    conv_types = (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)
    for mod_name, mod in module.named_modules():
        if isinstance(mod, conv_types):
            names.extend(f"{mod_name}.{p}" for p, _ in mod.named_parameters(recurse=False))
    for name, param in module.named_parameters():
        if param.dim() == 5 and name not in names:
            names.append(name)
    return names
