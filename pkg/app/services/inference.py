"""
Model loading and whole-volume prediction (no sliding window, no test-time augmentation).
"""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.volume import crop_array
from app.models.encoder import ViTEncoder3D
from app.models.segmentation import SegmentationModel
from app.schemas.model import DecoderSpec, EncoderConfig
from app.schemas.volume import Volume
from app.services.dataset import LabeledCase, model_input
from app.utils.checkpoint import check_fingerprint, load_checkpoint
from app.utils.exceptions import CheckpointError, ConfigError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("inference")

SEGMENTATION_KIND = "segmentation"


def load_segmentation_model(
    checkpoint_path: Path,
    expected_encoder: Optional[EncoderConfig] = None,
    device: str = "cpu",
) -> Tuple[SegmentationModel, Dict[str, Any]]:
    payload = load_checkpoint(checkpoint_path, expected_kind=SEGMENTATION_KIND)
    config = payload["config"]
    try:
        encoder_cfg = EncoderConfig(**config["encoder"])
        spec = DecoderSpec(**config["finetune"]["decoder"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint {checkpoint_path} has no usable model config: {e}")
    if expected_encoder is not None:
        check_fingerprint(expected_encoder, payload["fingerprint"])
    model = SegmentationModel(ViTEncoder3D(encoder_cfg), spec)
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint {checkpoint_path} does not fit a {spec.kind.value} model",
            details={"missing": list(missing)[:10], "unexpected": list(unexpected)[:10]},
        )
    model.to(device).eval()
    return model, payload


@torch.no_grad()
def predict(model: SegmentationModel, volume: Volume, device: str = "cpu") -> Volume:
    """Voxelwise sigmoid probabilities, cropped back to the input dims"""
    was_training = model.training
    model.eval()
    data, padding = model_input(volume, model.patch_size)
    logits = model(torch.from_numpy(data)[None, None].to(device))
    prob = torch.sigmoid(logits)[0, 0].float().cpu().numpy()
    if was_training:
        model.train()
    return Volume(data=crop_array(prob, padding).astype(np.float32), spacing=volume.spacing, id=volume.id,
                  patient_id=volume.patient_id)


def predict_checkpoint(checkpoint_path: Path, volume: Volume, device: str = "cpu") -> Volume:
    model, _ = load_segmentation_model(checkpoint_path, device=device)
    return predict(model, volume, device=device)


def predict_cases(
    model: SegmentationModel, cases: Sequence[LabeledCase], device: str = "cpu"
) -> Tuple[List[str], List[np.ndarray], List[np.ndarray], List[Tuple[float, float, float]]]:
    """(case ids, probabilities, labels, spacings) for labeled cases, in case order"""
    ids, probs, gts, spacings = [], [], [], []
    for case in cases:
        if case.label is None:
            raise ConfigError(f"case {case.case_id} has no label to compare against", details={"case_id": case.case_id})
        ids.append(case.case_id)
        probs.append(predict(model, case.volume, device=device).data)
        gts.append(case.label)
        spacings.append(case.volume.spacing)
    return ids, probs, gts, spacings
