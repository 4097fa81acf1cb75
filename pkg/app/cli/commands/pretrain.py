import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.dataset import load_split
from app.services.pretrain import LOSS_LOG, pretrain
from app.utils.rich_logger import get_rich_logger

NAME = "pretrain"
logger = get_rich_logger("cmd.pretrain")


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Masked-autoencoder pre-training on the pre-train split")
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--resume", type=Path, default=None, help="epoch checkpoint to continue from")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    volumes = [case.volume for case in load_split(args.manifest, "pretrain", with_labels=False)]
    result = pretrain(
        volumes, cfg.encoder_config(), cfg.mae, cfg.pretrain, out_dir, resume_from=args.resume, device=device
    )
    return {
        "checkpoint": str(result.checkpoint_path),
        "loss_log": str(Path(out_dir) / LOSS_LOG),
        "epochs": result.epochs_run,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "seed": cfg.pretrain.seed,
    }
