import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.calibration import load_calibration
from app.services.dataset import load_split
from app.services.workflow import BLAND_ALTMAN_PLOT, evaluate_checkpoint, report_summary
from app.utils.exceptions import ConfigError
from app.utils.rich_logger import get_rich_logger

NAME = "evaluate"
logger = get_rich_logger("cmd.evaluate")


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Test-set report with bootstrap CIs and agreement plots")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--calibration", type=Path, default=None, help="calibration.json; 0.5 is used without one")
    parser.add_argument("--split", default=None, help="manifest split to evaluate (default: eval.test_split)")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    calibration = None
    if args.calibration is not None:
        if not args.calibration.exists():
            raise ConfigError(f"calibration file {args.calibration} does not exist",
                              details={"path": str(args.calibration)})
        calibration = load_calibration(args.calibration)
    else:
        logger.info("[evaluate] no calibration file, using the uncalibrated threshold 0.5")
    cases = load_split(args.manifest, args.split or cfg.eval.test_split)
    report = evaluate_checkpoint(
        args.checkpoint, cases, cfg.eval, out_dir, calibration=calibration, seed=cfg.seed, device=device
    )
    return {
        "report": str(Path(out_dir) / "report.json"),
        "cases_csv": str(Path(out_dir) / "cases.csv"),
        "bland_altman": str(Path(out_dir) / BLAND_ALTMAN_PLOT),
        "excluded_cases": report.excluded_cases,
        **report_summary(report),
    }
