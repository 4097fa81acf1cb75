import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.dataset import manifest_summary
from app.services.phantom_dataset import generate_dataset
from app.utils.rich_logger import get_rich_logger

NAME = "phantom_gen"
logger = get_rich_logger("cmd.phantom_gen")


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Generate the phantom dataset and its manifest")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    manifest_path, manifest = generate_dataset(
        cfg.data.phantom,
        cfg.data.counts,
        out_dir,
        volume_format=cfg.data.volume_format,
        workers=cfg.data.workers,
    )
    counts = manifest_summary(manifest)
    logger.info(f"[phantom_gen] manifest {manifest_path}: {counts}")
    return {"manifest": str(manifest_path), "cases": counts, "seed": cfg.data.phantom.seed}
