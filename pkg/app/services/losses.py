"""
Fine-tuning loss: mean of soft-Dice and foreground-weighted binary cross-entropy.
"""
import torch
import torch.nn.functional as F

from app.schemas.training import LossSpec
from app.utils.exceptions import ShapeError


def positive_weight(target: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    """Background/foreground voxel ratio clipped to [pos_weight_min, pos_weight_max]"""
    fg = target.sum()
    bg = target.numel() - fg
    if fg.item() == 0:
        return torch.tensor(spec.pos_weight_max, dtype=target.dtype, device=target.device)
    return (bg / fg).clamp(spec.pos_weight_min, spec.pos_weight_max)


def soft_dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - soft Dice, computed per sample and averaged over the batch"""
    prob = torch.sigmoid(logits).flatten(1)
    target = target.flatten(1)
    inter = (prob * target).sum(dim=1)
    denom = prob.sum(dim=1) + target.sum(dim=1)
    return (1.0 - (2.0 * inter + smooth) / (denom + smooth)).mean()


def segmentation_loss(logits: torch.Tensor, target: torch.Tensor, spec: LossSpec) -> torch.Tensor:
    if logits.shape != target.shape:
        raise ShapeError(
            f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ",
            details={"logits": list(logits.shape), "target": list(target.shape)},
        )
    bce = F.binary_cross_entropy_with_logits(logits, target, pos_weight=positive_weight(target, spec))
    dice = soft_dice_loss(logits, target, spec.smooth)
    return (spec.dice_weight * dice + spec.bce_weight * bce) / (spec.dice_weight + spec.bce_weight)
