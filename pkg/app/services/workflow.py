"""
Checkpoint-level calibration and evaluation shared by the command line and the ablation grid.
"""
from pathlib import Path
from typing import Dict, Optional, Sequence

from app.schemas.evaluation import CalibrationResult, EvalReport
from app.schemas.run import EvalSection
from app.services.calibration import calibrate_threshold, plot_calibration_curve
from app.services.dataset import LabeledCase
from app.services.evaluation import evaluate_predictions, write_eval_report
from app.services.inference import load_segmentation_model, predict_cases
from app.utils.response import write_json
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("workflow")

CALIBRATION_FILE = "calibration.json"
CALIBRATION_PLOT = "calibration_curve.png"
BLAND_ALTMAN_PLOT = "bland_altman.png"


def calibrate_checkpoint(
    checkpoint: Path,
    cases: Sequence[LabeledCase],
    eval_cfg: EvalSection,
    out_dir: Path,
    device: str = "cpu",
) -> CalibrationResult:
    """Pick t* on the given (development) cases; writes calibration.json and its curve plot"""
    model, _ = load_segmentation_model(Path(checkpoint), device=device)
    usable = [c for c in cases if c.has_foreground]
    if len(usable) < len(cases):
        logger.warning(f"[calibrate] skipped {len(cases) - len(usable)} cases with empty annotation")
    _, probs, gts, spacings = predict_cases(model, usable, device=device)
    result = calibrate_threshold(probs, gts, spacings, grid=eval_cfg.threshold_grid)
    result = result.model_copy(update={"checkpoint": str(checkpoint)})
    out_dir = Path(out_dir)
    write_json(out_dir / CALIBRATION_FILE, result.model_dump(mode="json"))
    plot_calibration_curve(result, out_dir / CALIBRATION_PLOT)
    return result


def evaluate_checkpoint(
    checkpoint: Path,
    cases: Sequence[LabeledCase],
    eval_cfg: EvalSection,
    out_dir: Path,
    calibration: Optional[CalibrationResult] = None,
    seed: int = 0,
    device: str = "cpu",
) -> EvalReport:
    """Test-set report at t* (calibrated) or 0.5 (uncalibrated); writes report.json, cases.csv and the Bland-Altman plot"""
    model, _ = load_segmentation_model(Path(checkpoint), device=device)
    ids, probs, gts, spacings = predict_cases(model, cases, device=device)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_predictions(
        ids, probs, gts, spacings,
        calibration=calibration,
        resamples=eval_cfg.resamples,
        confidence=eval_cfg.confidence,
        seed=seed,
        plot_path=out_dir / BLAND_ALTMAN_PLOT,
        checkpoint=str(checkpoint),
    )
    write_eval_report(report, out_dir)
    return report


def report_summary(report: EvalReport) -> Dict:
    """Flat headline numbers (one results-table row without the grid columns)"""
    agg = report.aggregates
    row = {
        "dice": agg["dice"].mean,
        "dice_lo": agg["dice"].lo,
        "dice_hi": agg["dice"].hi,
        "precision": agg["precision"].mean if "precision" in agg else None,
        "recall": agg["recall"].mean,
        "volume_diff": agg["volume_diff_mm3"].mean,
        "threshold": report.threshold,
        "threshold_note": report.threshold_note,
        "n_cases": len(report.cases),
    }
    if report.risk_groups is not None:
        row["risk_accuracy"] = report.risk_groups.accuracy
    return row
