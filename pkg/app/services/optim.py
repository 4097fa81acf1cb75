"""
Optimiser and learning-rate schedule shared by pre-training and fine-tuning.
"""
import math
from typing import Dict, Iterable, List

import numpy as np
import torch
import torch.nn as nn

from app.schemas.training import LRSchedule
from config.settings import settings


def decay_groups(module: nn.Module, lr: float, weight_decay: float) -> List[Dict]:
    """Weight decay on matrices and kernels only; biases, norms and mask tokens are exempt"""
    decay, no_decay = [], []
    for name, param in module.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim <= 1 or name.endswith("mask_token"):
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "lr": lr, "weight_decay": weight_decay},
        {"params": no_decay, "lr": lr, "weight_decay": 0.0},
    ]


def build_optimizer(groups: Iterable[Dict], schedule: LRSchedule) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(groups), betas=tuple(schedule.betas))


def warmup_cosine(
    optimizer: torch.optim.Optimizer, total_steps: int, schedule: LRSchedule
) -> torch.optim.lr_scheduler.LambdaLR:
    """Linear warmup over warmup_fraction of the steps, then cosine decay to min_lr"""
    warmup = int(round(schedule.warmup_fraction * total_steps))
    peak = max(group["lr"] for group in optimizer.param_groups)
    floor = schedule.min_lr / peak if peak > 0 else 0.0

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        progress = (step - warmup) / max(1, total_steps - warmup)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def step_seed(seed: int, epoch: int, step: int) -> int:
    """Independent 63-bit seed per (run seed, epoch, step)"""
    return int(np.random.SeedSequence([seed, epoch, step]).generate_state(1, dtype=np.uint64)[0]) >> 1


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Batch order is a pure function of (seed, epoch)"""
    return np.random.default_rng([seed, epoch]).permutation(n)


def configure_torch(seed: int) -> None:
    torch.manual_seed(seed)
    if settings.TORCH_THREADS:
        torch.set_num_threads(settings.TORCH_THREADS)
    if settings.DETERMINISTIC:
        torch.use_deterministic_algorithms(True, warn_only=True)
