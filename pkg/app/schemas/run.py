from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from app.schemas.data import PhantomConfig, SplitCounts
from app.schemas.model import DecoderKind, DecoderSpec, EncoderConfig, MAEDecoderConfig, UpsampleMode
from app.schemas.training import FinetuneRunConfig, PretrainRunConfig
from config.settings import settings

Provenance = Literal["default", "file", "flag"]

# leaves that follow the global --seed unless set explicitly
SEED_LEAVES = ("data.phantom.seed", "pretrain.seed", "finetune.seed", "finetune.init_seed")


class DataSection(BaseModel):
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    counts: SplitCounts = Field(default_factory=SplitCounts)
    volume_format: Literal["nii.gz", "nii", "raw"] = "nii.gz"
    workers: int = Field(default_factory=lambda: settings.NUM_WORKERS, ge=1)

    model_config = {"extra": "forbid"}


class EncoderSection(BaseModel):
    name: str = "ViTiac-S"
    patch_size: int = Field(default=8, gt=0)
    mlp_ratio: float = Field(default=4.0, gt=0)

    model_config = {"extra": "forbid"}

    def to_config(self, patch_size: Optional[int] = None, name: Optional[str] = None) -> EncoderConfig:
        return EncoderConfig.from_name(name or self.name, patch_size=patch_size or self.patch_size, mlp_ratio=self.mlp_ratio)


class EvalSection(BaseModel):
    resamples: int = Field(default_factory=lambda: settings.BOOTSTRAP_RESAMPLES, ge=1)
    confidence: float = Field(default=0.95, gt=0, lt=1)
    threshold_grid: Optional[List[float]] = None
    calibration_split: str = "dev"
    test_split: str = "test"

    model_config = {"extra": "forbid"}


class AblationSection(BaseModel):
    patch_sizes: List[int] = Field(default_factory=lambda: [4, 8, 16])
    encoders: List[str] = Field(default_factory=lambda: ["ViTiac-S"])
    decoders: List[DecoderKind] = Field(default_factory=lambda: list(DecoderKind))
    upsample_modes: List[UpsampleMode] = Field(default_factory=lambda: [UpsampleMode.NN_INTERP_CONV])
    pretrain: bool = True
    # also fine-tune every cell from a random encoder; needs pretrain
    from_scratch_baseline: bool = False
    # replicate seeds; empty runs the grid once at the run seed
    seeds: List[int] = Field(default_factory=list)
    workers: int = Field(default_factory=lambda: settings.NUM_WORKERS, ge=1)

    model_config = {"extra": "forbid"}

    @field_validator("patch_sizes", "encoders", "decoders", "upsample_modes")
    @classmethod
    def _nonempty(cls, v: list) -> list:
        if not v:
            raise ValueError("ablation axes must not be empty")
        return v

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError(f"replicate seeds must be distinct, got {v}")
        return v

    @model_validator(mode="after")
    def _baseline_needs_pretraining(self) -> "AblationSection":
        if self.from_scratch_baseline and not self.pretrain:
            raise ValueError("from_scratch_baseline compares against pre-trained cells; set pretrain=true")
        return self

    def init_modes(self) -> List[bool]:
        """Whether each cell variant starts from a pre-trained encoder"""
        if not self.pretrain:
            return [False]
        return [True, False] if self.from_scratch_baseline else [True]

    def cells(self) -> List[Tuple[str, int, DecoderKind, UpsampleMode]]:
        """(encoder, patch_size, decoder, upsample_mode); MAE_DEC is not crossed with upsample modes"""
        out = []
        for name in self.encoders:
            for p in self.patch_sizes:
                for kind in self.decoders:
                    modes = self.upsample_modes[:1] if kind == DecoderKind.MAE_DEC else self.upsample_modes
                    out.extend((name, p, kind, mode) for mode in modes)
        return out


class RunConfig(BaseModel):
    """Fully resolved experiment configuration; `provenance` maps dotted leaf paths to their source"""

    seed: int = 0
    device: str = "auto"
    data: DataSection = Field(default_factory=DataSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    mae: MAEDecoderConfig = Field(default_factory=MAEDecoderConfig)
    decoder: DecoderSpec = Field(default_factory=DecoderSpec)
    pretrain: PretrainRunConfig = Field(default_factory=PretrainRunConfig)
    finetune: FinetuneRunConfig = Field(default_factory=FinetuneRunConfig)
    eval: EvalSection = Field(default_factory=EvalSection)
    ablate: AblationSection = Field(default_factory=AblationSection)
    provenance: Dict[str, Provenance] = Field(default_factory=dict, exclude=True)

    model_config = {"extra": "forbid"}

    def encoder_config(self) -> EncoderConfig:
        return self.encoder.to_config()

    def finetune_config(self, **overrides) -> FinetuneRunConfig:
        """The fine-tune section with the top-level decoder section applied"""
        return self.finetune.model_copy(update={"decoder": self.decoder, **overrides})

    def with_seed(self, seed: int) -> "RunConfig":
        """Replicate of this config: the global seed and every training seed leaf set to `seed`"""
        return self.model_copy(update={
            "seed": seed,
            "pretrain": self.pretrain.model_copy(update={"seed": seed}),
            "finetune": self.finetune.model_copy(update={"seed": seed, "init_seed": seed}),
        })

    def source_of(self, path: str) -> Provenance:
        return self.provenance.get(path, "default")
