from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

SplitTag = Literal["pretrain", "finetune", "dev", "test"]

MANIFEST_COLUMNS = [
    "case_id", "patient_id", "path", "split", "manufacturer", "slice_thickness_mm",
    "label_path", "foreground_voxels",
]

MANUFACTURERS = ("Siemens", "GE", "Toshiba", "Philips", "Hitachi")


class PhantomConfig(BaseModel):
    dims: Tuple[int, int, int] = (64, 64, 32)
    inplane_spacing_mm: Tuple[float, float] = (0.4, 0.6)
    slice_thickness_mm: Tuple[float, float] = (0.5, 5.0)
    # finest z spacing used before averaging down to the sampled thickness
    fine_slice_mm: float = Field(default=0.5, gt=0)
    max_fine_factor: int = Field(default=8, ge=1)
    lesion_count: Tuple[int, int] = (1, 4)
    lesion_radius_vox: Tuple[float, float] = (2.0, 4.0)
    lesion_hu: Tuple[float, float] = (200.0, 1200.0)
    tissue_hu_mean: float = 40.0
    tissue_hu_std: float = 15.0
    vessel_hu: float = 55.0
    bone_hu: Tuple[float, float] = (700.0, 1500.0)
    bone_band_vox: int = Field(default=5, ge=0)
    noise_std: float = Field(default=10.0, ge=0)
    noise_smoothing: float = Field(default=0.7, ge=0)
    max_placement_retries: int = Field(default=50, ge=1)
    manufacturers: Tuple[str, ...] = MANUFACTURERS[:4]
    seed: int = 0

    model_config = {"validate_assignment": True}

    @model_validator(mode="after")
    def _check_ranges(self) -> "PhantomConfig":
        if self.lesion_hu[0] < 130.0:
            raise ValueError("lesion intensities must be >= 130 HU so lesions are annotation-positive")
        for name in ("inplane_spacing_mm", "slice_thickness_mm", "lesion_count", "lesion_radius_vox", "lesion_hu", "bone_hu"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        if self.lesion_count[0] < 0:
            raise ValueError("lesion_count must be non-negative")
        if min(self.dims) < 1:
            raise ValueError(f"dims must be positive, got {self.dims}")
        return self


class AnnotationRule(BaseModel):
    """Threshold circled regions at >= 130 HU and drop components smaller than 2 pixels"""

    hu_threshold: float = 130.0
    min_component_size: int = 2
    per_slice: bool = True  # 2D 8-connected components; False uses 3D 26-connectivity
    allow_override: bool = False

    @model_validator(mode="after")
    def _fixed_constants(self) -> "AnnotationRule":
        if not self.allow_override and (self.hu_threshold != 130.0 or self.min_component_size != 2):
            raise ValueError("annotation constants are fixed (130 HU, 2 pixels); set allow_override to change them")
        return self


class ManifestEntry(BaseModel):
    case_id: str
    patient_id: str
    path: str
    split: SplitTag
    manufacturer: str = "unknown"
    slice_thickness_mm: float = Field(default=1.0, gt=0)
    label_path: Optional[str] = None
    foreground_voxels: Optional[int] = None


class DatasetManifest(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list)

    def cases(self, split: str) -> List[ManifestEntry]:
        """Entries of a split; 'pretrain' includes the fine-tune subset"""
        if split == "pretrain":
            return [e for e in self.entries if e.split in ("pretrain", "finetune")]
        return [e for e in self.entries if e.split == split]

    def patients_by_split(self) -> Dict[str, set]:
        groups = {"train": set(), "dev": set(), "test": set()}
        for e in self.entries:
            key = "train" if e.split in ("pretrain", "finetune") else e.split
            groups[key].add(e.patient_id)
        return groups

    def validate_invariants(self) -> None:
        from app.utils.exceptions import ManifestError

        groups = self.patients_by_split()
        for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
            shared = groups[a] & groups[b]
            if shared:
                raise ManifestError(
                    f"patients appear in both {a} and {b}: {sorted(shared)[:5]}",
                    details={"splits": [a, b], "patients": sorted(shared)},
                )
        for split in ("dev", "test"):
            seen: Dict[str, str] = {}
            for e in self.cases(split):
                if e.patient_id in seen:
                    raise ManifestError(
                        f"{split} split has more than one series for patient {e.patient_id}",
                        details={"split": split, "patient_id": e.patient_id},
                    )
                seen[e.patient_id] = e.case_id
        pretrain_ids = {e.case_id for e in self.cases("pretrain")}
        missing = [e.case_id for e in self.cases("finetune") if e.case_id not in pretrain_ids]
        if missing:
            raise ManifestError("fine-tune cases missing from the pre-train set", details={"cases": missing})


class SplitCounts(BaseModel):
    """Desk-scale manifest sizes"""

    train_patients: int = Field(default=50, ge=1)
    series_per_train_patient: int = Field(default=4, ge=1)
    dev_patients: int = Field(default=16, ge=1)
    test_patients: int = Field(default=16, ge=1)
    finetune_cases: int = Field(default=12, ge=1)
