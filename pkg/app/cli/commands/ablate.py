import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.ablation import PLOT_FILE, SUMMARY_FILE, run_ablation

NAME = "ablate"


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(
        NAME, parents=parents,
        help="Patch size x encoder size x decoder (x upsample mode) grid over replicate seeds; axes come from the ablate section",
    )
    parser.add_argument("--manifest", type=Path, required=True)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    csv_path, frame = run_ablation(cfg, args.manifest, out_dir, device=device)
    return {
        "results": str(csv_path),
        "summary": str(Path(out_dir) / SUMMARY_FILE),
        "plot": str(Path(out_dir) / PLOT_FILE),
        "cells": len(cfg.ablate.cells()),
        "runs": len(frame),
        "rows": frame.drop(columns=["checkpoint"]).to_dict(orient="records"),
    }
