from typing import Optional

from pydantic import BaseModel, Field, field_validator

from app.schemas.model import DecoderSpec


class LRSchedule(BaseModel):
    """AdamW with linear warmup then cosine decay; lr = base_lr * batch_size / 256"""

    base_lr: float = Field(default=1.5e-4, gt=0)
    warmup_fraction: float = Field(default=0.05, ge=0, lt=1)
    min_lr: float = Field(default=0.0, ge=0)
    weight_decay: float = Field(default=0.05, ge=0)
    betas: tuple[float, float] = (0.9, 0.95)
    scale_with_batch: bool = True

    def peak_lr(self, batch_size: int) -> float:
        return self.base_lr * batch_size / 256 if self.scale_with_batch else self.base_lr


class PretrainRunConfig(BaseModel):
    mask_ratio: float = Field(default=0.9, gt=0, lt=1)
    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=4, ge=1)
    schedule: LRSchedule = Field(default_factory=LRSchedule)
    seed: int = 0
    pixel_norm: bool = True
    log_every: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=10, ge=1)

    model_config = {"validate_assignment": True}

    @classmethod
    def full_length(cls, **overrides) -> "PretrainRunConfig":
        """Full-length pre-training schedule (800 epochs)"""
        return cls(**{"epochs": 800, **overrides})


class LossSpec(BaseModel):
    """Mean of soft-Dice and positive-weighted BCE"""

    dice_weight: float = Field(default=0.5, ge=0)
    bce_weight: float = Field(default=0.5, ge=0)
    pos_weight_min: float = Field(default=1.0, gt=0)
    pos_weight_max: float = Field(default=100.0, gt=0)
    smooth: float = Field(default=1e-5, gt=0)


class FinetuneRunConfig(BaseModel):
    pretrained_checkpoint: Optional[str] = None
    init_seed: int = 0
    decoder: DecoderSpec = Field(default_factory=DecoderSpec)
    loss: LossSpec = Field(default_factory=LossSpec)
    epochs: int = Field(default=300, ge=1)
    batch_size: int = Field(default=2, ge=1)
    schedule: LRSchedule = Field(
        default_factory=lambda: LRSchedule(base_lr=1e-3, scale_with_batch=False, betas=(0.9, 0.999))
    )
    encoder_lr_multiplier: float = Field(default=0.1, ge=0)
    early_stopping_patience: Optional[int] = Field(default=50, ge=1)
    include_empty_labels: bool = False
    threshold: float = Field(default=0.5, gt=0, lt=1)
    seed: int = 0

    model_config = {"validate_assignment": True}

    @field_validator("pretrained_checkpoint")
    @classmethod
    def _blank_is_none(cls, v: Optional[str]) -> Optional[str]:
        return v or None

    @property
    def from_scratch(self) -> bool:
        return self.pretrained_checkpoint is None
