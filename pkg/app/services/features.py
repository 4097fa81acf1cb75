"""
Feature-map dumps for checkerboard inspection: the central z-slice of every
decoder stage (channel mean) and of the final probability map, as 16-bit PNGs.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from app.core.volume import crop_array
from app.models.segmentation import SegmentationModel
from app.models.upsampling import phase_variance
from app.schemas.volume import Volume
from app.services.dataset import model_input
from app.utils.exceptions import UnknownStageError
from app.utils.response import write_json
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("features")

PROBABILITY_STAGE = "prob"
UINT16_MAX = 65535


def central_slice(fmap: np.ndarray) -> np.ndarray:
    """(X, Y, Z) -> (X, Y) slice at z = Z // 2"""
    return fmap[:, :, fmap.shape[2] // 2]


def to_uint16(image: np.ndarray) -> np.ndarray:
    """Min-max scale to the full 16-bit range; constant images map to zeros"""
    lo, hi = float(image.min()), float(image.max())
    if hi - lo <= 0:
        return np.zeros(image.shape, dtype=np.uint16)
    return np.round((image - lo) / (hi - lo) * UINT16_MAX).astype(np.uint16)


def save_png16(image: np.ndarray, path: Path) -> Path:
    # rows are y, columns are x
    Image.fromarray(np.ascontiguousarray(to_uint16(image).T)).save(path)
    return path


def available_stages(model: SegmentationModel) -> List[str]:
    return list(model.decoder.stage_names()) + [PROBABILITY_STAGE]


@torch.no_grad()
def dump_feature_maps(
    model: SegmentationModel,
    volume: Volume,
    out_dir: Path,
    stages: Optional[Sequence[str]] = None,
    device: str = "cpu",
) -> Dict:
    """Write `{stage}_{scale}.png` per selected stage plus index.json; returns the index"""
    valid = available_stages(model)
    selected = list(stages) if stages else valid
    for name in selected:
        if name not in valid:
            raise UnknownStageError(name, valid)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    data, padding = model_input(volume, model.patch_size)
    logits, stage_maps = model.forward_with_stages(torch.from_numpy(data)[None, None].to(device))

    entries = []
    for name, scale, tensor in stage_maps:
        if name not in selected:
            continue
        fmap = tensor[0].double()
        mean_map = fmap.mean(dim=0).cpu().numpy()
        path = save_png16(central_slice(mean_map), out_dir / f"{name}_{scale}.png")
        entries.append({
            "stage": name,
            "scale": scale,
            "file": path.name,
            "shape": list(mean_map.shape),
            "min": float(mean_map.min()),
            "max": float(mean_map.max()),
            # spatial variance per channel, averaged over channels
            "variance": float(fmap.flatten(1).var(dim=1, unbiased=False).mean()),
            "phase_variance": phase_variance(fmap),
        })

    if PROBABILITY_STAGE in selected:
        prob = crop_array(torch.sigmoid(logits)[0, 0].double().cpu().numpy(), padding)
        scale = model.patch_size
        path = save_png16(central_slice(prob), out_dir / f"{PROBABILITY_STAGE}_{scale}.png")
        entries.append({
            "stage": PROBABILITY_STAGE,
            "scale": scale,
            "file": path.name,
            "shape": list(prob.shape),
            "min": float(prob.min()),
            "max": float(prob.max()),
            "variance": float(prob.var()),
            "phase_variance": phase_variance(torch.from_numpy(np.ascontiguousarray(prob))),
        })

    index = {"case_id": volume.id, "decoder": model.spec.kind.value, "upsample_mode": model.spec.upsample_mode.value,
             "patch_size": model.patch_size, "stages": entries}
    write_json(out_dir / "index.json", index)
    logger.info(f"[features] wrote {len(entries)} feature maps for {volume.id} to {out_dir}")
    return index
