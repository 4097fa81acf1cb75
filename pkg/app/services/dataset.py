"""
Loading manifest splits into model-ready arrays.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.core.volume import conform, pad_array, standardize_hu
from app.schemas.data import DatasetManifest, ManifestEntry
from app.schemas.volume import Padding, PatchConfig, Volume
from app.utils.exceptions import ShapeError
from app.utils.rich_logger import get_rich_logger
from app.utils.volume_io import read_manifest, read_mask, read_volume, resolve_path

logger = get_rich_logger("dataset")


@dataclass
class LabeledCase:
    volume: Volume
    label: Optional[np.ndarray] = None
    entry: Optional[ManifestEntry] = None

    @property
    def case_id(self) -> str:
        return self.volume.id

    @property
    def has_foreground(self) -> bool:
        return self.label is not None and bool(np.any(self.label))


def load_split(
    manifest: Union[str, Path],
    split: str,
    with_labels: bool = True,
) -> List[LabeledCase]:
    """Cases of one split in manifest order; 'pretrain' includes the fine-tune subset"""
    manifest_path = Path(manifest)
    entries = read_manifest(manifest_path).cases(split)
    cases = []
    for entry in entries:
        volume = read_volume(resolve_path(manifest_path, entry.path))
        volume = volume.model_copy(update={"id": entry.case_id, "patient_id": entry.patient_id})
        label = None
        if with_labels and entry.label_path:
            label = read_mask(resolve_path(manifest_path, entry.label_path))
            if label.shape != volume.dims:
                raise ShapeError(
                    f"label of {entry.case_id} has shape {label.shape}, volume has {volume.dims}",
                    details={"case_id": entry.case_id},
                )
        cases.append(LabeledCase(volume=volume, label=label, entry=entry))
    logger.info(f"[dataset] loaded {len(cases)} '{split}' cases from {manifest_path.name}")
    return cases


def model_input(volume: Volume, patch_size: int) -> Tuple[np.ndarray, Padding]:
    """Pad to the patch grid and standardise HU to [-1, 1]"""
    data, padding = conform(volume, PatchConfig(patch_size=patch_size, pad=True))
    return standardize_hu(data).astype(np.float32), padding


def stack_inputs(volumes: Sequence[Volume], patch_size: int) -> Tuple[torch.Tensor, List[Padding]]:
    arrays, paddings = zip(*(model_input(v, patch_size) for v in volumes))
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ShapeError(
            f"volumes have different padded shapes {sorted(shapes)}; batch them separately",
            details={"shapes": [list(s) for s in sorted(shapes)]},
        )
    return torch.from_numpy(np.stack(arrays)[:, None]), list(paddings)


def stack_labels(labels: Sequence[np.ndarray], paddings: Sequence[Padding]) -> torch.Tensor:
    padded = [pad_array(np.asarray(l, dtype=np.float32), p, value=0.0) for l, p in zip(labels, paddings)]
    return torch.from_numpy(np.stack(padded)[:, None])


def manifest_summary(manifest: DatasetManifest) -> dict:
    return {
        split: len(manifest.cases(split)) for split in ("pretrain", "finetune", "dev", "test")
    }
