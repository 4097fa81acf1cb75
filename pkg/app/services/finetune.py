"""
Supervised fine-tuning of encoder + segmentation decoder.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from app.models.encoder import ViTEncoder3D, build_encoder
from app.models.segmentation import SegmentationModel, build_segmentation_model
from app.schemas.model import EncoderConfig
from app.schemas.training import FinetuneRunConfig
from app.services.dataset import LabeledCase, stack_inputs, stack_labels
from app.services.inference import SEGMENTATION_KIND, predict
from app.services.losses import segmentation_loss
from app.services.metrics import binarize, dice
from app.services.optim import batch_order, build_optimizer, configure_torch, decay_groups, warmup_cosine
from app.utils.checkpoint import (
    check_fingerprint,
    encoder_state,
    load_checkpoint,
    make_fingerprint,
    save_checkpoint,
    state_checksum,
)
from app.utils.exceptions import ConfigError, NonFiniteLossError, ShapeError
from app.utils.response import JsonlWriter
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("finetune")

METRICS_LOG = "finetune_metrics.jsonl"
BEST_CHECKPOINT = "finetune_best.pt"


@dataclass
class FinetuneResult:
    checkpoint_path: Path
    best_epoch: int = 0
    best_dev_dice: Optional[float] = None
    history: List[Dict] = field(default_factory=list)
    encoder_init_checksum: str = ""
    stopped_early: bool = False


def _check_cases(cases: Sequence[LabeledCase], include_empty: bool, split: str) -> List[LabeledCase]:
    kept = []
    for case in cases:
        if case.label is None:
            raise ConfigError(f"{split} case {case.case_id} has no label", details={"case_id": case.case_id})
        if case.label.shape != case.volume.dims:
            raise ShapeError(
                f"label of {case.case_id} has shape {case.label.shape}, volume has {case.volume.dims}",
                details={"case_id": case.case_id},
            )
        if case.has_foreground or include_empty:
            kept.append(case)
    skipped = len(cases) - len(kept)
    if skipped:
        logger.warning(f"[finetune] skipped {skipped} {split} cases with empty annotation")
    return kept


def initial_encoder(encoder_cfg: EncoderConfig, cfg: FinetuneRunConfig) -> ViTEncoder3D:
    """Pre-trained encoder (fingerprint-checked) or a seeded random one"""
    if cfg.from_scratch:
        return build_encoder(encoder_cfg, init_seed=cfg.init_seed)
    payload = load_checkpoint(Path(cfg.pretrained_checkpoint), expected_kind="pretrain")
    check_fingerprint(encoder_cfg, payload["fingerprint"])
    encoder = ViTEncoder3D(encoder_cfg)
    encoder.load_state_dict(encoder_state(payload["state_dict"]))
    logger.info(f"[finetune] encoder initialised from {cfg.pretrained_checkpoint}")
    return encoder


def mean_dice(model: SegmentationModel, cases: Sequence[LabeledCase], threshold: float, device: str) -> Optional[float]:
    """Unweighted mean Dice over cases with a nonempty annotation; never updates weights"""
    scores = [
        dice(binarize(predict(model, case.volume, device=device).data, threshold), case.label)
        for case in cases
        if case.has_foreground
    ]
    return float(np.mean(scores)) if scores else None


def finetune(
    train_cases: Sequence[LabeledCase],
    dev_cases: Sequence[LabeledCase],
    encoder_cfg: EncoderConfig,
    cfg: FinetuneRunConfig,
    out_dir: Path,
    device: str = "cpu",
) -> FinetuneResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_torch(cfg.seed)

    train = _check_cases(train_cases, cfg.include_empty_labels, "training")
    dev = _check_cases(dev_cases, True, "development")
    if not train:
        raise ConfigError("no usable fine-tuning case (all annotations empty?)")

    encoder = initial_encoder(encoder_cfg, cfg)
    model = build_segmentation_model(encoder_cfg, cfg.decoder, init_seed=cfg.init_seed, encoder=encoder).to(device)
    result = FinetuneResult(checkpoint_path=out_dir / BEST_CHECKPOINT, encoder_init_checksum=state_checksum(model.encoder))

    inputs, paddings = stack_inputs([c.volume for c in train], encoder_cfg.patch_size)
    targets = stack_labels([c.label for c in train], paddings)
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    peak = cfg.schedule.peak_lr(cfg.batch_size)
    groups = decay_groups(model.encoder, peak * cfg.encoder_lr_multiplier, cfg.schedule.weight_decay)
    groups += decay_groups(model.decoder, peak, cfg.schedule.weight_decay)
    optimizer = build_optimizer(groups, cfg.schedule)
    scheduler = warmup_cosine(optimizer, steps_per_epoch * cfg.epochs, cfg.schedule)

    fingerprint = {**make_fingerprint(encoder_cfg, cfg.seed), "pretrained": cfg.pretrained_checkpoint}
    config = {"encoder": encoder_cfg.model_dump(mode="json"), "finetune": cfg.model_dump(mode="json")}
    log = JsonlWriter(out_dir / METRICS_LOG, truncate=True)
    tag = f"[finetune {cfg.decoder.kind.value} {'scratch' if cfg.from_scratch else 'ssl'}]"
    logger.info(f"{tag} {n} training / {len(dev)} development cases, {cfg.epochs} epochs")

    best_score = -math.inf
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = batch_order(cfg.seed, epoch, n)
        losses = []
        for step in range(steps_per_epoch):
            idx = torch.as_tensor(order[step * cfg.batch_size:(step + 1) * cfg.batch_size])
            logits = model(inputs[idx].to(device))
            loss = segmentation_loss(logits, targets[idx].to(device), cfg.loss)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(
                    "finetune", f"epoch {epoch} step {step} cases {[train[int(i)].case_id for i in idx]}", value
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            losses.append(value)

        train_loss = float(np.mean(losses))
        dev_dice = mean_dice(model, dev, cfg.threshold, device) if dev else None
        record = log.write(
            {"epoch": epoch, "train_loss": train_loss, "dev_dice": dev_dice, "lr": optimizer.param_groups[-1]["lr"]}
        )
        result.history.append(record)
        # without development cases, the lowest training loss selects the checkpoint
        score = dev_dice if dev_dice is not None else -train_loss
        if score > best_score:
            best_score = score
            since_best = 0
            result.best_epoch = epoch
            result.best_dev_dice = dev_dice
            save_checkpoint(
                result.checkpoint_path, SEGMENTATION_KIND, model, fingerprint, config,
                epoch=epoch, dev_dice=dev_dice,
            )
        else:
            since_best += 1
        logger.debug(f"{tag} epoch {epoch} loss {train_loss:.4f} dev Dice {dev_dice}")
        if cfg.early_stopping_patience and since_best >= cfg.early_stopping_patience:
            logger.info(f"{tag} early stop at epoch {epoch}, best epoch {result.best_epoch}")
            result.stopped_early = True
            break

    logger.info(f"{tag} best epoch {result.best_epoch}, dev Dice {result.best_dev_dice}")
    return result
