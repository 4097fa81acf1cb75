import argparse
from pathlib import Path
from typing import Dict, Optional

from app.schemas.run import RunConfig
from app.services.dataset import load_split
from app.services.workflow import CALIBRATION_FILE, CALIBRATION_PLOT, calibrate_checkpoint

NAME = "calibrate"


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Choose the volume-calibrated decision threshold")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--split", default=None, help="manifest split to calibrate on (default: eval.calibration_split)")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    split: Optional[str] = args.split or cfg.eval.calibration_split
    cases = load_split(args.manifest, split)
    result = calibrate_checkpoint(args.checkpoint, cases, cfg.eval, out_dir, device=device)
    return {
        "calibration": str(Path(out_dir) / CALIBRATION_FILE),
        "curve": str(Path(out_dir) / CALIBRATION_PLOT),
        "threshold": result.threshold,
        "mean_abs_volume_diff_before": result.mean_abs_volume_diff_before,
        "mean_abs_volume_diff_after": result.mean_abs_volume_diff_after,
        "n_cases": result.n_cases,
    }
