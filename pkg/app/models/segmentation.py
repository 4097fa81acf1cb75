from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from app.core.volume import grid_dims_for, patchify_tensor
from app.models.decoders import SegmentationDecoder, Stage, build_decoder
from app.models.encoder import ViTEncoder3D, build_encoder, count_parameters
from app.schemas.model import DecoderSpec, EncoderConfig
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("segmentation")


class SegmentationModel(nn.Module):
    """Encoder + segmentation decoder; input is a standardised (B, 1, X, Y, Z) volume"""

    def __init__(self, encoder: ViTEncoder3D, spec: DecoderSpec):
        super().__init__()
        self.encoder = encoder
        self.spec = spec
        self.decoder: SegmentationDecoder = build_decoder(encoder.cfg, spec)

    @property
    def patch_size(self) -> int:
        return self.encoder.patch_size

    def _latent(self, x: torch.Tensor):
        grid = grid_dims_for(tuple(x.shape[2:]), self.patch_size)
        patches = patchify_tensor(x, self.patch_size)
        return self.encoder(patches, grid, keep_hidden=self.decoder.taps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self._latent(x), x)

    def forward_with_stages(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[Stage]]:
        stages: List[Stage] = []
        latent = self._latent(x)
        logits = self.decoder.run(latent, x, stages=stages)
        return logits, stages


def build_segmentation_model(
    encoder_cfg: EncoderConfig,
    spec: DecoderSpec,
    init_seed: int = 0,
    encoder: Optional[ViTEncoder3D] = None,
) -> SegmentationModel:
    """Reproducible model construction; a given encoder is used as-is, the decoder is always fresh"""
    if encoder is None:
        encoder = build_encoder(encoder_cfg, init_seed=init_seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed + 1)
        model = SegmentationModel(encoder, spec)
    logger.info(
        f"[model] {spec.kind.value} decoder ({spec.upsample_mode.value}) on {encoder_cfg.name} "
        f"p={encoder_cfg.patch_size}: decoder params={count_parameters(model.decoder):,}"
    )
    return model
