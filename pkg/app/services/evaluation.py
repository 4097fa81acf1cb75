"""
Clinical-style evaluation: bootstrap confidence intervals, Bland-Altman agreement,
quartile risk groups, stratified summaries and the EvalReport files.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from app.schemas.evaluation import (
    DEFAULT_THRESHOLD,
    BlandAltmanResult,
    CalibrationResult,
    CaseMetrics,
    ConfidenceInterval,
    EvalReport,
    RiskGroupResult,
    StratumMetrics,
)
from app.services.metrics import binarize, case_metrics
from app.utils.exceptions import ConfigError, ShapeError
from app.utils.response import write_json
from app.utils.rich_logger import get_rich_logger
from config.settings import settings

logger = get_rich_logger("evaluation")

LIMITS_OF_AGREEMENT_Z = 1.96
SLICE_THICKNESS_BINS = ((0.0, 1.0, "<=1mm"), (1.0, 3.0, "1-3mm"), (3.0, 5.0, "3-5mm"), (5.0, np.inf, ">5mm"))
LESION_SIZE_LABELS = ("small", "medium", "large")


def bootstrap_ci(
    values: Sequence[float],
    resamples: int = 1000,
    confidence: float = 0.95,
    seed: int = 0,
) -> ConfidenceInterval:
    """Percentile bootstrap of the mean over cases (resampling with replacement)"""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        raise ConfigError("bootstrap needs at least one value")
    if not 0.0 < confidence < 1.0:
        raise ConfigError(f"confidence {confidence} outside (0, 1)")
    if np.all(data == data[0]):
        v = float(data[0])
        return ConfidenceInterval(mean=v, lo=v, hi=v, resamples=resamples, confidence=confidence)

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.size, size=(resamples, data.size))
    means = data[idx].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return ConfidenceInterval(
        mean=float(data.mean()), lo=float(lo), hi=float(hi), resamples=resamples, confidence=confidence
    )


def bland_altman(
    pred_volumes: Sequence[float],
    gt_volumes: Sequence[float],
    plot_path: Optional[Path] = None,
) -> BlandAltmanResult:
    pred = np.asarray(pred_volumes, dtype=np.float64)
    gt = np.asarray(gt_volumes, dtype=np.float64)
    if pred.size == 0 or pred.shape != gt.shape:
        raise ShapeError(
            "Bland-Altman needs equal-length nonempty volume lists",
            details={"pred": int(pred.size), "gt": int(gt.size)},
        )
    means = (pred + gt) / 2.0
    diffs = pred - gt
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1)) if diffs.size > 1 else 0.0
    result = BlandAltmanResult(
        means=means.tolist(),
        diffs=diffs.tolist(),
        bias=bias,
        sd=sd,
        lower_limit=bias - LIMITS_OF_AGREEMENT_Z * sd,
        upper_limit=bias + LIMITS_OF_AGREEMENT_Z * sd,
    )
    if plot_path is not None:
        result.plot_path = str(plot_bland_altman(result, plot_path))
    return result


def plot_bland_altman(result: BlandAltmanResult, path: Path, title: str = "Bland-Altman: calcification volume") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.scatter(result.means, result.diffs, s=14, color="tab:blue", alpha=0.8)
    ax.axhline(result.bias, color="tab:red", label=f"bias {result.bias:.1f}")
    ax.axhline(result.upper_limit, color="grey", linestyle="--", label=f"+1.96 SD {result.upper_limit:.1f}")
    ax.axhline(result.lower_limit, color="grey", linestyle="--", label=f"-1.96 SD {result.lower_limit:.1f}")
    ax.set_xlabel("mean of predicted and annotated volume [mm³]")
    ax.set_ylabel("predicted - annotated [mm³]")
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def quartile_groups(volumes: Sequence[float], boundaries: Sequence[float]) -> np.ndarray:
    """Group index 0..3; a volume exactly on a boundary goes to the lower group"""
    return np.searchsorted(np.asarray(boundaries, dtype=np.float64), np.asarray(volumes, dtype=np.float64), side="left")


def risk_group_classification(gt_volumes: Sequence[float], pred_volumes: Sequence[float]) -> RiskGroupResult:
    gt = np.asarray(gt_volumes, dtype=np.float64)
    pred = np.asarray(pred_volumes, dtype=np.float64)
    if gt.size < 4:
        raise ConfigError(f"risk groups need at least 4 cases, got {gt.size}")
    if gt.shape != pred.shape:
        raise ShapeError("annotated and predicted volume lists differ in length")
    q = np.percentile(gt, [25.0, 50.0, 75.0])
    true_groups = quartile_groups(gt, q)
    pred_groups = quartile_groups(pred, q)
    confusion = np.zeros((4, 4), dtype=int)
    np.add.at(confusion, (true_groups, pred_groups), 1)
    correct = int(np.trace(confusion))
    return RiskGroupResult(
        boundaries=tuple(float(b) for b in q),
        accuracy=correct / gt.size,
        correct=correct,
        total=int(gt.size),
        confusion_matrix=confusion.tolist(),
    )


def _stratum(name: str, cases: List[CaseMetrics]) -> StratumMetrics:
    precisions = [c.precision for c in cases if c.precision is not None]
    return StratumMetrics(
        stratum=name,
        n_cases=len(cases),
        mean_dice=float(np.mean([c.dice for c in cases])),
        mean_volume_diff_mm3=float(np.mean([c.volume_diff_mm3 for c in cases])),
        mean_precision=float(np.mean(precisions)) if precisions else None,
        mean_recall=float(np.mean([c.recall for c in cases])),
    )


def slice_thickness_strata(cases: Sequence[CaseMetrics]) -> List[StratumMetrics]:
    """Bins (lo, hi] by slice thickness; empty bins are omitted"""
    out = []
    for lo, hi, name in SLICE_THICKNESS_BINS:
        members = [c for c in cases if lo < c.slice_thickness_mm <= hi]
        if members:
            out.append(_stratum(name, members))
    return out


def lesion_size_strata(cases: Sequence[CaseMetrics]) -> List[StratumMetrics]:
    """Tertiles of annotated volume; boundary values go to the lower group"""
    if len(cases) < 3:
        return []
    volumes = np.array([c.annotated_volume_mm3 for c in cases])
    cuts = np.percentile(volumes, [100.0 / 3.0, 200.0 / 3.0])
    groups = np.searchsorted(cuts, volumes, side="left")
    out = []
    for g, name in enumerate(LESION_SIZE_LABELS):
        members = [c for c, k in zip(cases, groups) if k == g]
        if members:
            out.append(_stratum(name, members))
    return out


def evaluate_predictions(
    case_ids: Sequence[str],
    probs: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    spacings: Sequence[Sequence[float]],
    threshold: float = DEFAULT_THRESHOLD,
    calibration: Optional[CalibrationResult] = None,
    resamples: Optional[int] = None,
    confidence: float = 0.95,
    seed: int = 0,
    plot_path: Optional[Path] = None,
    checkpoint: Optional[str] = None,
) -> EvalReport:
    """Per-case metrics in case order, bootstrap CIs and agreement statistics.

    Cases with an empty annotation are excluded and listed in the report.
    """
    resamples = resamples or settings.BOOTSTRAP_RESAMPLES
    if calibration is not None:
        threshold = calibration.threshold
    cases: List[CaseMetrics] = []
    excluded: List[str] = []
    for case_id, prob, gt, spacing in zip(case_ids, probs, gts, spacings):
        if not np.any(gt):
            excluded.append(case_id)
            continue
        cases.append(case_metrics(case_id, binarize(prob, threshold), gt, spacing))
    if excluded:
        logger.warning(f"[evaluate] excluded {len(excluded)} cases with empty annotation: {excluded[:5]}")
    if not cases:
        raise ConfigError("no evaluable case (every annotation is empty)", details={"excluded": excluded})

    columns: Dict[str, List[float]] = {
        "dice": [c.dice for c in cases],
        "precision": [c.precision for c in cases if c.precision is not None],
        "recall": [c.recall for c in cases],
        "volume_diff_mm3": [c.volume_diff_mm3 for c in cases],
    }
    aggregates = {
        name: bootstrap_ci(values, resamples=resamples, confidence=confidence, seed=seed)
        for name, values in columns.items()
        if values
    }
    pred_v = [c.predicted_volume_mm3 for c in cases]
    gt_v = [c.annotated_volume_mm3 for c in cases]
    report = EvalReport(
        checkpoint=checkpoint,
        threshold=threshold,
        calibrated=calibration is not None,
        cases=cases,
        aggregates=aggregates,
        calibration=calibration,
        bland_altman=bland_altman(pred_v, gt_v, plot_path=plot_path),
        risk_groups=risk_group_classification(gt_v, pred_v) if len(cases) >= 4 else None,
        slice_thickness_strata=slice_thickness_strata(cases),
        lesion_size_strata=lesion_size_strata(cases),
        excluded_cases=excluded,
        seed=seed,
    )
    dice_ci = aggregates["dice"]
    logger.info(
        f"[evaluate] {len(cases)} cases at threshold {threshold:.3f} ({report.threshold_note}): "
        f"Dice {dice_ci.mean:.3f} [{dice_ci.lo:.3f}; {dice_ci.hi:.3f}]"
    )
    return report


def write_eval_report(report: EvalReport, out_dir: Path) -> Tuple[Path, Path]:
    """report.json plus one CSV row per case"""
    out_dir = Path(out_dir)
    json_path = write_json(out_dir / "report.json", report.model_dump(mode="json"))
    rows = [{**c.model_dump(), "volume_diff_mm3": c.volume_diff_mm3} for c in report.cases]
    csv_path = out_dir / "cases.csv"
    pd.DataFrame(rows).to_csv(csv_path, index=False)
    return json_path, csv_path
