from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

HU_FLOOR = -1024.0


class Volume(BaseModel):
    """A 3D CT-like region of interest: HU intensities on an (x, y, z) grid"""

    data: np.ndarray
    spacing: Tuple[float, float, float]
    id: str = "volume"
    patient_id: str = "patient"

    model_config = {
        "arbitrary_types_allowed": True,
        "validate_assignment": True,
    }

    @field_validator("data")
    @classmethod
    def _check_data(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume data must be 3D with every axis >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("volume data contains non-finite values")
        return v

    @field_validator("spacing")
    @classmethod
    def _check_spacing(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if not all(np.isfinite(s) and s > 0 for s in v):
            raise ValueError(f"spacing components must be positive and finite, got {v}")
        return tuple(float(s) for s in v)

    @classmethod
    def ingest(
        cls,
        data: np.ndarray,
        spacing: Tuple[float, float, float],
        id: str = "volume",
        patient_id: str = "patient",
    ) -> "Volume":
        """Build a Volume from raw data, replacing non-finite voxels by the HU floor"""
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim == 3 and not np.all(np.isfinite(arr)):
            arr = np.nan_to_num(arr, nan=HU_FLOOR, posinf=HU_FLOOR, neginf=HU_FLOOR)
        return cls(data=arr, spacing=spacing, id=id, patient_id=patient_id)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    @property
    def slice_thickness_mm(self) -> float:
        return self.spacing[2]


class PatchConfig(BaseModel):
    """Cubic patch size p; with pad=True non-conforming volumes are padded with the HU floor"""

    patch_size: int = Field(default=8, gt=0)
    pad: bool = True

    model_config = {"validate_assignment": True}


class Padding(BaseModel):
    """Per-axis (before, after) padding applied to reach a multiple of the patch size"""

    before: Tuple[int, int, int] = (0, 0, 0)
    after: Tuple[int, int, int] = (0, 0, 0)
    original_dims: Optional[Tuple[int, int, int]] = None

    @property
    def is_identity(self) -> bool:
        return not any(self.before) and not any(self.after)


class TokenSequence(BaseModel):
    """Flattened patch tokens in z-major raster order plus their grid"""

    tokens: np.ndarray
    grid_dims: Tuple[int, int, int]
    patch_size: int

    model_config = {"arbitrary_types_allowed": True}

    @model_validator(mode="after")
    def _check_count(self) -> "TokenSequence":
        gx, gy, gz = self.grid_dims
        if self.tokens.ndim != 2 or self.tokens.shape[0] != gx * gy * gz:
            raise ValueError(
                f"token count {self.tokens.shape[0] if self.tokens.ndim else None} "
                f"does not match grid {self.grid_dims}"
            )
        return self

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def grid_coords(self) -> np.ndarray:
        """(N, 3) array of (i, j, k) grid positions, in token order"""
        gx, gy, gz = self.grid_dims
        k, j, i = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
        return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)


class PositionTable(BaseModel):
    encodings: np.ndarray
    grid_dims: Tuple[int, int, int]

    model_config = {"arbitrary_types_allowed": True}
