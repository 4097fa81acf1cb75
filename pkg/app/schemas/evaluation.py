from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

DEFAULT_THRESHOLD = 0.5


def default_threshold_grid() -> List[float]:
    """199 points 0.005, 0.010, ..., 0.995"""
    return [round(k * 0.005, 3) for k in range(1, 200)]


class CaseMetrics(BaseModel):
    case_id: str
    dice: float = Field(ge=0.0, le=1.0)
    precision: Optional[float] = Field(default=None, ge=0.0, le=1.0)  # None when nothing was predicted
    recall: float = Field(ge=0.0, le=1.0)
    predicted_volume_mm3: float = Field(ge=0.0)
    annotated_volume_mm3: float = Field(ge=0.0)
    slice_thickness_mm: float = Field(gt=0.0)

    @property
    def volume_diff_mm3(self) -> float:
        return abs(self.predicted_volume_mm3 - self.annotated_volume_mm3)


class CalibrationResult(BaseModel):
    threshold: float = Field(gt=0.0, lt=1.0)
    mean_abs_volume_diff_before: float = Field(ge=0.0)
    mean_abs_volume_diff_after: float = Field(ge=0.0)
    grid: List[float]
    curve: List[Tuple[float, float]] = Field(default_factory=list)  # (threshold, mean |dV|)
    n_cases: int = Field(default=0, ge=0)
    checkpoint: Optional[str] = None

    @model_validator(mode="after")
    def _after_not_worse(self) -> "CalibrationResult":
        if self.mean_abs_volume_diff_after > self.mean_abs_volume_diff_before + 1e-9:
            raise ValueError("calibrated volume difference exceeds the uncalibrated one")
        return self


class ConfidenceInterval(BaseModel):
    mean: float
    lo: float
    hi: float
    resamples: int
    confidence: float

    @model_validator(mode="after")
    def _brackets(self) -> "ConfidenceInterval":
        if not self.lo <= self.hi:
            raise ValueError(f"interval lower bound {self.lo} exceeds upper bound {self.hi}")
        return self


class BlandAltmanResult(BaseModel):
    means: List[float]
    diffs: List[float]
    bias: float
    sd: float
    lower_limit: float
    upper_limit: float
    plot_path: Optional[str] = None


class RiskGroupResult(BaseModel):
    boundaries: Tuple[float, float, float]
    accuracy: float = Field(ge=0.0, le=1.0)
    correct: int
    total: int
    confusion_matrix: List[List[int]]  # rows: annotated group, columns: predicted group
    labels: Tuple[str, str, str, str] = ("no", "low", "moderate", "high")


class StratumMetrics(BaseModel):
    stratum: str
    n_cases: int
    mean_dice: float
    mean_volume_diff_mm3: float
    mean_precision: Optional[float] = None
    mean_recall: Optional[float] = None


class EvalReport(BaseModel):
    checkpoint: Optional[str] = None
    threshold: float = DEFAULT_THRESHOLD
    calibrated: bool = False
    cases: List[CaseMetrics]
    aggregates: Dict[str, ConfidenceInterval]
    calibration: Optional[CalibrationResult] = None
    bland_altman: BlandAltmanResult
    risk_groups: Optional[RiskGroupResult] = None
    slice_thickness_strata: List[StratumMetrics] = Field(default_factory=list)
    lesion_size_strata: List[StratumMetrics] = Field(default_factory=list)
    excluded_cases: List[str] = Field(default_factory=list)
    seed: int = 0

    @property
    def threshold_note(self) -> str:
        return "calibrated" if self.calibrated else "uncalibrated"
