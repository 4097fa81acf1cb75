"""
Masked-autoencoder pre-training loop.

Batch order depends only on (seed, epoch) and each step's mask on
(seed, epoch, step), so a run resumed from an epoch checkpoint follows the
uninterrupted trajectory.
"""
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
from scipy import stats

from app.models.encoder import build_encoder, count_parameters
from app.models.mae import MaskedAutoencoder3D
from app.schemas.model import EncoderConfig, MAEDecoderConfig
from app.schemas.training import PretrainRunConfig
from app.schemas.volume import Volume
from app.services.dataset import stack_inputs
from app.services.optim import batch_order, build_optimizer, configure_torch, decay_groups, step_seed, warmup_cosine
from app.utils.checkpoint import load_checkpoint, make_fingerprint, save_checkpoint
from app.utils.exceptions import ConfigError, FingerprintMismatchError, NonFiniteLossError
from app.utils.response import JsonlWriter
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("pretrain")

LOSS_LOG = "pretrain_loss.jsonl"
LAST_CHECKPOINT = "pretrain_last.pt"


@dataclass
class PretrainResult:
    checkpoint_path: Path
    epoch_losses: List[float] = field(default_factory=list)
    epochs_run: int = 0

    @property
    def initial_loss(self) -> float:
        return self.epoch_losses[0] if self.epoch_losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def epoch_checkpoint_name(epoch: int) -> str:
    return f"pretrain_epoch{epoch:04d}.pt"


def build_mae(encoder_cfg: EncoderConfig, mae_cfg: MAEDecoderConfig, run_cfg: PretrainRunConfig) -> MaskedAutoencoder3D:
    encoder = build_encoder(encoder_cfg, init_seed=run_cfg.seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(run_cfg.seed + 2)
        model = MaskedAutoencoder3D(encoder, mae_cfg, pixel_norm=run_cfg.pixel_norm)
    logger.debug(f"[pretrain] MAE decoder params={count_parameters(model.decoder):,}")
    return model


def pretrain(
    volumes: Sequence[Volume],
    encoder_cfg: EncoderConfig,
    mae_cfg: MAEDecoderConfig,
    run_cfg: PretrainRunConfig,
    out_dir: Path,
    resume_from: Optional[Path] = None,
    device: str = "cpu",
) -> PretrainResult:
    if not volumes:
        raise ConfigError("pre-training needs at least one volume")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    configure_torch(run_cfg.seed)

    inputs, _ = stack_inputs(volumes, encoder_cfg.patch_size)
    case_ids = [v.id for v in volumes]
    n = len(volumes)
    steps_per_epoch = math.ceil(n / run_cfg.batch_size)
    total_steps = steps_per_epoch * run_cfg.epochs

    model = build_mae(encoder_cfg, mae_cfg, run_cfg).to(device)
    peak = run_cfg.schedule.peak_lr(run_cfg.batch_size)
    optimizer = build_optimizer(decay_groups(model, peak, run_cfg.schedule.weight_decay), run_cfg.schedule)
    scheduler = warmup_cosine(optimizer, total_steps, run_cfg.schedule)
    fingerprint = make_fingerprint(encoder_cfg, run_cfg.seed)
    config = {
        "encoder": encoder_cfg.model_dump(mode="json"),
        "mae": mae_cfg.model_dump(mode="json"),
        "pretrain": run_cfg.model_dump(mode="json"),
    }

    start_epoch = 1
    log = JsonlWriter(out_dir / LOSS_LOG)
    result = PretrainResult(checkpoint_path=out_dir / LAST_CHECKPOINT)
    if resume_from is not None:
        payload = load_checkpoint(resume_from, expected_kind="pretrain")
        found = payload["fingerprint"]
        if any(found.get(k) != fingerprint.get(k) for k in ("encoder", "patch_size", "embed_dim", "depth", "heads", "seed")):
            raise FingerprintMismatchError(expected=fingerprint, found=found)
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        scheduler.load_state_dict(payload["scheduler"])
        start_epoch = int(payload["epoch"]) + 1
        result.epoch_losses = list(payload.get("epoch_losses", []))
        log.truncate_after("epoch", start_epoch - 1)
        logger.info(f"[pretrain] resuming from {resume_from} at epoch {start_epoch}")
    else:
        log = JsonlWriter(out_dir / LOSS_LOG, truncate=True)

    logger.info(
        f"[pretrain] {n} volumes, {run_cfg.epochs} epochs x {steps_per_epoch} steps, "
        f"mask ratio {run_cfg.mask_ratio}, peak lr {peak:.2e}"
    )
    global_step = (start_epoch - 1) * steps_per_epoch
    for epoch in range(start_epoch, run_cfg.epochs + 1):
        model.train()
        order = batch_order(run_cfg.seed, epoch, n)
        running = []
        for step in range(steps_per_epoch):
            idx = order[step * run_cfg.batch_size:(step + 1) * run_cfg.batch_size]
            batch = inputs[torch.as_tensor(idx)].to(device)
            generator = torch.Generator().manual_seed(step_seed(run_cfg.seed, epoch, step))
            out = model(batch, run_cfg.mask_ratio, generator)
            loss_value = float(out.loss.detach())
            if not math.isfinite(loss_value):
                batch_id = f"epoch {epoch} step {step} cases {[case_ids[i] for i in idx]}"
                raise NonFiniteLossError("pretrain", batch_id, loss_value)
            optimizer.zero_grad(set_to_none=True)
            out.loss.backward()
            optimizer.step()
            lr = optimizer.param_groups[0]["lr"]
            scheduler.step()
            global_step += 1
            running.append(loss_value)
            if global_step % run_cfg.log_every == 0:
                log.write({"epoch": epoch, "step": global_step, "loss": loss_value, "lr": lr})

        epoch_loss = float(np.mean(running))
        result.epoch_losses.append(epoch_loss)
        result.epochs_run = epoch
        logger.info(f"[pretrain] epoch {epoch}/{run_cfg.epochs} loss {epoch_loss:.4f}")

        last = epoch == run_cfg.epochs
        if epoch % run_cfg.checkpoint_every == 0 or last:
            extra = dict(
                epoch=epoch,
                optimizer=optimizer.state_dict(),
                scheduler=scheduler.state_dict(),
                epoch_losses=list(result.epoch_losses),
            )
            save_checkpoint(out_dir / LAST_CHECKPOINT, "pretrain", model, fingerprint, config, **extra)
            if epoch % run_cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / epoch_checkpoint_name(epoch), "pretrain", model, fingerprint, config, **extra)

    return result


@torch.no_grad()
def reconstruction_correlation(
    model: MaskedAutoencoder3D, volumes: Sequence[Volume], mask_ratio: float = 0.9, seed: int = 0
) -> float:
    """Pearson r between masked-token predictions and their normalised targets"""
    model.eval()
    inputs, _ = stack_inputs(volumes, model.patch_size)
    out = model(inputs, mask_ratio, torch.Generator().manual_seed(seed))
    masked = out.mask.bool()
    pred = out.pred[masked].flatten().double().numpy()
    target = out.target[masked].flatten().double().numpy()
    return float(stats.pearsonr(pred, target)[0])


def load_mae(checkpoint_path: Path) -> MaskedAutoencoder3D:
    payload = load_checkpoint(checkpoint_path, expected_kind="pretrain")
    cfg = payload["config"]
    model = build_mae(
        EncoderConfig(**cfg["encoder"]), MAEDecoderConfig(**cfg["mae"]), PretrainRunConfig(**cfg["pretrain"])
    )
    model.load_state_dict(payload["state_dict"])
    return model
