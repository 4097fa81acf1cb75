"""
Decision-threshold calibration: choose the threshold minimising the mean absolute
predicted-vs-annotated volume difference on the development set.
"""
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from app.schemas.evaluation import DEFAULT_THRESHOLD, CalibrationResult, default_threshold_grid
from app.services.metrics import volume_mm3
from app.utils.exceptions import ConfigError, ShapeError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("calibration")

TIE_TOLERANCE = 1e-12


def _check_grid(grid: Sequence[float]) -> np.ndarray:
    values = np.asarray(sorted(set(float(t) for t in grid)), dtype=np.float64)
    if values.size == 0 or values[0] <= 0.0 or values[-1] >= 1.0:
        raise ConfigError("threshold grid must be a nonempty subset of (0, 1)", details={"grid": list(grid)})
    if not np.any(values == DEFAULT_THRESHOLD):
        raise ConfigError("threshold grid must contain 0.5", details={"grid": list(grid)})
    return values


def volume_curve(prob: np.ndarray, spacing: Sequence[float], grid: Sequence[float]) -> np.ndarray:
    """Predicted volume (mm^3) at every grid threshold, prob >= t counted as foreground"""
    flat = np.sort(np.asarray(prob, dtype=np.float64).ravel())
    counts = flat.size - np.searchsorted(flat, np.asarray(grid, dtype=np.float64), side="left")
    sx, sy, sz = (float(s) for s in spacing)
    return counts * (sx * sy * sz)


def calibrate_threshold(
    probs: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    spacings: Sequence[Sequence[float]],
    grid: Optional[Sequence[float]] = None,
) -> CalibrationResult:
    """argmin over the grid of mean_c |V_pred(t, c) - V_gt(c)|.

    Ties go to the threshold nearest 0.5, then to the larger one.
    """
    if not probs:
        raise ConfigError("calibration needs at least one development case")
    if not len(probs) == len(gts) == len(spacings):
        raise ShapeError(
            "probabilities, annotations and spacings differ in length",
            details={"probs": len(probs), "gts": len(gts), "spacings": len(spacings)},
        )
    grid_values = _check_grid(grid if grid is not None else default_threshold_grid())

    diffs = np.empty((len(probs), grid_values.size), dtype=np.float64)
    for c, (prob, gt, spacing) in enumerate(zip(probs, gts, spacings)):
        if np.shape(prob) != np.shape(gt):
            raise ShapeError(f"case {c}: probability {np.shape(prob)} vs annotation {np.shape(gt)}")
        diffs[c] = np.abs(volume_curve(prob, spacing, grid_values) - volume_mm3(gt, spacing))
    mean_diff = diffs.mean(axis=0)

    best = mean_diff.min()
    tied = np.flatnonzero(mean_diff <= best + TIE_TOLERANCE * max(1.0, abs(best)))
    pick = min(tied, key=lambda i: (abs(grid_values[i] - DEFAULT_THRESHOLD), -grid_values[i]))
    at_default = int(np.flatnonzero(grid_values == DEFAULT_THRESHOLD)[0])

    result = CalibrationResult(
        threshold=float(grid_values[pick]),
        mean_abs_volume_diff_before=float(mean_diff[at_default]),
        mean_abs_volume_diff_after=float(mean_diff[pick]),
        grid=[float(t) for t in grid_values],
        curve=[(float(t), float(v)) for t, v in zip(grid_values, mean_diff)],
        n_cases=len(probs),
    )
    logger.info(
        f"[calibrate] t*={result.threshold:.3f} mean |dV| {result.mean_abs_volume_diff_before:.2f} -> "
        f"{result.mean_abs_volume_diff_after:.2f} mm^3 over {len(probs)} cases"
    )
    return result


def plot_calibration_curve(result: CalibrationResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    thresholds, values = zip(*result.curve) if result.curve else ([], [])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(thresholds, values, color="tab:blue")
    ax.axvline(DEFAULT_THRESHOLD, color="grey", linestyle=":", label="0.5")
    ax.axvline(result.threshold, color="tab:red", linestyle="--", label=f"t* = {result.threshold:.3f}")
    ax.set_xlabel("threshold")
    ax.set_ylabel("mean |ΔV| [mm³]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def load_calibration(path: Path) -> CalibrationResult:
    return CalibrationResult.model_validate_json(Path(path).read_text())
