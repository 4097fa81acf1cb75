import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.dataset import load_split
from app.services.finetune import METRICS_LOG, finetune
from app.utils.exceptions import ConfigError
from app.utils.rich_logger import get_rich_logger

NAME = "finetune"
logger = get_rich_logger("cmd.finetune")


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Supervised fine-tuning of encoder and decoder")
    parser.add_argument("--manifest", type=Path, required=True)
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--pretrained", type=Path, default=None, help="pre-training checkpoint")
    source.add_argument("--from-scratch", action="store_true", help="random encoder initialisation")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    if args.from_scratch:
        pretrained = None
    elif args.pretrained is not None:
        if not args.pretrained.exists():
            raise ConfigError(f"pre-training checkpoint {args.pretrained} does not exist",
                              details={"path": str(args.pretrained)})
        pretrained = str(args.pretrained)
    else:
        pretrained = cfg.finetune.pretrained_checkpoint
    ft_cfg = cfg.finetune_config(pretrained_checkpoint=pretrained)

    train = load_split(args.manifest, "finetune")
    dev = load_split(args.manifest, cfg.eval.calibration_split)
    result = finetune(train, dev, cfg.encoder_config(), ft_cfg, out_dir, device=device)
    return {
        "checkpoint": str(result.checkpoint_path),
        "metrics_log": str(Path(out_dir) / METRICS_LOG),
        "best_epoch": result.best_epoch,
        "best_dev_dice": result.best_dev_dice,
        "stopped_early": result.stopped_early,
        "pretrained": pretrained,
        "seed": ft_cfg.seed,
    }
