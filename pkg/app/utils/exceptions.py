"""
Custom exception classes for structured error handling
"""
from typing import Dict, Any, Optional, List


class PipelineError(Exception):
    """Base pipeline error with a structured, machine-readable payload"""

    def __init__(
        self,
        error_code: str,
        message: str,
        user_message: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
        exit_code: int = 1,
    ):
        self.error_code = error_code
        self.message = message
        self.user_message = user_message or message
        self.details = details or {}
        self.exit_code = exit_code
        super().__init__(message)

    @property
    def detail(self) -> Dict[str, Any]:
        return {
            "error_code": self.error_code,
            "message": self.message,
            "user_message": self.user_message,
            "details": self.details,
        }


# Configuration errors
class ConfigError(PipelineError):
    """Raised when a configuration value is invalid or inconsistent"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            error_code="CONFIG_ERROR",
            message=message,
            user_message="Please check the configuration values and try again.",
            details=details,
            exit_code=2,
        )


# Array shape errors
class DimensionError(PipelineError):
    """Raised when a volume axis is not compatible with the patch size"""
    def __init__(self, axis: str, size: int, patch_size: int):
        super().__init__(
            error_code="DIMENSION_ERROR",
            message=f"Axis {axis} has size {size}, not a multiple of patch size {patch_size}",
            user_message="Volume dimensions do not fit the patch grid; enable padding or resize the volume.",
            details={"axis": axis, "size": size, "patch_size": patch_size},
        )


class ShapeError(PipelineError):
    """Raised when arrays do not have the expected shape"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            error_code="SHAPE_ERROR",
            message=message,
            user_message="Input arrays have an unexpected shape.",
            details=details,
        )


# Metric errors
class UndefinedMetricError(PipelineError):
    """Raised when an overlap metric is undefined (empty denominator)"""
    def __init__(self, metric: str, reason: str):
        super().__init__(
            error_code="UNDEFINED_METRIC",
            message=f"{metric} is undefined: {reason}",
            user_message="Metric cannot be computed for this case.",
            details={"metric": metric, "reason": reason},
        )


# Data errors
class VolumeParseError(PipelineError):
    """Raised when a volume file header or payload is malformed"""
    def __init__(self, path: str, byte_offset: int, message: str):
        self.byte_offset = byte_offset
        super().__init__(
            error_code="VOLUME_PARSE_ERROR",
            message=f"{path}: {message} (byte offset {byte_offset})",
            user_message="The volume file is malformed or truncated.",
            details={"path": path, "byte_offset": byte_offset},
        )


class PhantomGenerationError(PipelineError):
    """Raised when a phantom cannot be generated within the retry budget"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            error_code="PHANTOM_GENERATION_ERROR",
            message=message,
            user_message="Phantom generation failed; relax the lesion constraints.",
            details=details,
        )


class ManifestError(PipelineError):
    """Raised when a dataset manifest violates its invariants"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            error_code="MANIFEST_ERROR",
            message=message,
            user_message="The dataset manifest is inconsistent.",
            details=details,
        )


# Model / training errors
class CheckpointError(PipelineError):
    """Raised when a checkpoint cannot be read or does not fit the request"""
    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(
            error_code="CHECKPOINT_ERROR",
            message=message,
            user_message="The checkpoint cannot be used for this run.",
            details=details,
        )


class FingerprintMismatchError(PipelineError):
    """Raised when a pretrained checkpoint does not match the run's encoder config"""
    def __init__(self, expected: Dict[str, Any], found: Dict[str, Any]):
        super().__init__(
            error_code="FINGERPRINT_MISMATCH",
            message=f"Checkpoint fingerprint {found} does not match run encoder {expected}",
            user_message="The pretrained checkpoint was produced with a different encoder configuration.",
            details={"expected": expected, "found": found},
        )


class NonFiniteLossError(PipelineError):
    """Raised when a training loss becomes NaN or infinite"""
    def __init__(self, stage: str, batch_id: str, value: float):
        super().__init__(
            error_code="NON_FINITE_LOSS",
            message=f"{stage}: non-finite loss {value} at batch {batch_id}",
            user_message="Training diverged; lower the learning rate or check the inputs.",
            details={"stage": stage, "batch_id": batch_id, "value": str(value)},
        )


class UnknownStageError(PipelineError):
    """Raised when a feature-map stage selector names no existing stage"""
    def __init__(self, stage: str, valid_stages: List[str]):
        super().__init__(
            error_code="UNKNOWN_STAGE",
            message=f"Unknown stage '{stage}'. Valid stages: {', '.join(valid_stages)}",
            user_message="Pick one of the listed decoder stages.",
            details={"stage": stage, "valid_stages": valid_stages},
        )
