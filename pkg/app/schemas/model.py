from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

# Encoder size table. Widths/depths are our choice for desk-scale training.
ENCODER_SIZES: Dict[str, Tuple[int, int, int]] = {
    # name: (embed_dim, depth, num_heads)
    "ViTiac-S": (384, 6, 6),
    "ViTiac-M": (576, 8, 8),
    "ViTiac-L": (768, 12, 12),
}


class EncoderConfig(BaseModel):
    name: str = "ViTiac-S"
    embed_dim: int = Field(default=384, gt=0)
    depth: int = Field(default=6, gt=0)
    num_heads: int = Field(default=6, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0)
    patch_size: int = Field(default=8, gt=0)

    model_config = {"validate_assignment": True, "extra": "forbid"}

    @model_validator(mode="after")
    def _check_heads(self) -> "EncoderConfig":
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        return self

    @classmethod
    def from_name(cls, name: str, patch_size: int = 8, mlp_ratio: float = 4.0) -> "EncoderConfig":
        from app.utils.exceptions import ConfigError

        if name not in ENCODER_SIZES:
            raise ConfigError(
                f"Unknown encoder size '{name}'",
                details={"name": name, "known": sorted(ENCODER_SIZES)},
            )
        embed_dim, depth, heads = ENCODER_SIZES[name]
        return cls(
            name=name, embed_dim=embed_dim, depth=depth, num_heads=heads,
            mlp_ratio=mlp_ratio, patch_size=patch_size,
        )

    def fingerprint_fields(self) -> dict:
        return {
            "encoder": self.name,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.num_heads,
        }


class MaskingSpec(BaseModel):
    ratio: float = Field(default=0.9, ge=0.0, lt=1.0)
    rng_seed: int = 0


class MAEDecoderConfig(BaseModel):
    """Lightweight transformer decoder; embed_dim=None means half the encoder width"""

    embed_dim: Optional[int] = None
    depth: int = Field(default=2, gt=0)
    num_heads: int = Field(default=4, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0)

    def resolve(self, encoder: EncoderConfig, enforce_lightweight: bool = True) -> "MAEDecoderConfig":
        from app.utils.exceptions import ConfigError

        width = self.embed_dim
        if width is None:
            width = max(self.num_heads, (encoder.embed_dim // 2) // self.num_heads * self.num_heads)
        if width % self.num_heads:
            raise ConfigError(
                f"decoder width {width} is not divisible by {self.num_heads} heads",
                details={"embed_dim": width, "num_heads": self.num_heads},
            )
        if enforce_lightweight and (width >= encoder.embed_dim or self.depth >= encoder.depth):
            raise ConfigError(
                "MAE decoder must be lighter than its encoder (width and depth strictly smaller)",
                details={
                    "decoder": {"embed_dim": width, "depth": self.depth},
                    "encoder": {"embed_dim": encoder.embed_dim, "depth": encoder.depth},
                },
            )
        return self.model_copy(update={"embed_dim": width})


class DecoderKind(str, Enum):
    UNETR = "UNETR"
    SFPN_UNET = "SFPN_UNET"
    UPSCALE = "UPSCALE"
    MAE_DEC = "MAE_DEC"


class UpsampleMode(str, Enum):
    TRANSPOSED = "TRANSPOSED"
    NN_INTERP_CONV = "NN_INTERP_CONV"


class DecoderSpec(BaseModel):
    kind: DecoderKind = DecoderKind.MAE_DEC
    upsample_mode: UpsampleMode = UpsampleMode.NN_INTERP_CONV
    # Channel schedule: start at min(D, max_channels) at the token grid, halve per doubling
    max_channels: int = Field(default=256, gt=0)
    min_channels: int = Field(default=16, gt=0)
    # UNETR hidden-state taps (0-based block indices); None = 1/4, 1/2, 3/4 of depth
    taps: Optional[List[int]] = None
    # MAE_DEC head settings
    mae_decoder: MAEDecoderConfig = Field(default_factory=MAEDecoderConfig)

    model_config = {"validate_assignment": True}

    @model_validator(mode="after")
    def _check_taps(self) -> "DecoderSpec":
        if self.taps is not None:
            if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
                raise ValueError(f"UNETR taps must be strictly increasing, got {self.taps}")
            if any(t < 0 for t in self.taps):
                raise ValueError(f"UNETR taps must be non-negative, got {self.taps}")
        return self

    def channels(self, embed_dim: int, level: int) -> int:
        """Channels after `level` doublings from the token grid"""
        start = min(embed_dim, self.max_channels)
        return max(self.min_channels, start // (2 ** level)) if level > 0 else start
