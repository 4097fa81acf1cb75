"""
Decoder / patch-size / encoder-size ablation grid.

Each (encoder, patch size, seed) is pre-trained once; every grid cell then
fine-tunes and evaluates (uncalibrated) independently, optionally in worker
processes. Replicate seeds are averaged per cell in the summary table.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from matplotlib.ticker import ScalarFormatter

from app.schemas.model import DecoderKind, UpsampleMode
from app.schemas.run import RunConfig
from app.services.dataset import load_split
from app.services.finetune import finetune
from app.services.pretrain import pretrain
from app.services.workflow import evaluate_checkpoint, report_summary
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("ablation")

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"
PLOT_FILE = "dice_vs_patch_size.png"
RESULT_COLUMNS = [
    "decoder", "encoder", "patch_size", "upsample_mode", "dice", "dice_lo", "dice_hi",
    "precision", "recall", "volume_diff", "threshold_note", "pretrained", "seed", "checkpoint",
]
CELL_KEYS = ["decoder", "encoder", "patch_size", "upsample_mode", "pretrained"]
SUMMARY_COLUMNS = CELL_KEYS + [
    "n_seeds", "dice", "dice_sd", "dice_lo", "dice_hi", "precision", "recall", "volume_diff",
]


@dataclass(frozen=True)
class AblationCell:
    encoder: str
    patch_size: int
    decoder: DecoderKind
    upsample_mode: UpsampleMode

    @property
    def tag(self) -> str:
        return f"[cell vit={self.encoder.rsplit('-', 1)[-1]} p={self.patch_size} dec={self.decoder.value}]"

    @property
    def dirname(self) -> str:
        return f"{self.encoder}_p{self.patch_size}_{self.decoder.value}_{self.upsample_mode.value}"


def replicate_configs(cfg: RunConfig) -> List[RunConfig]:
    """One config per replicate seed; without `ablate.seeds` the run config itself, untouched"""
    if not cfg.ablate.seeds:
        return [cfg]
    return [cfg.with_seed(seed) for seed in cfg.ablate.seeds]


def pretrain_backbones(
    cfg: RunConfig, manifest: Path, out_dir: Path, device: str
) -> Dict[Tuple[str, int, int], Path]:
    """One MAE run per (encoder, patch size, replicate seed) used by the grid"""
    volumes = [c.volume for c in load_split(manifest, "pretrain", with_labels=False)]
    checkpoints = {}
    for replicate in replicate_configs(cfg):
        for name in cfg.ablate.encoders:
            for p in cfg.ablate.patch_sizes:
                run_dir = Path(out_dir) / "pretrain" / f"{name}_p{p}_seed{replicate.seed}"
                logger.info(f"[ablate] pre-training {name} p={p} seed={replicate.seed}")
                result = pretrain(
                    volumes, replicate.encoder.to_config(patch_size=p, name=name), replicate.mae,
                    replicate.pretrain, run_dir, device=device,
                )
                checkpoints[(name, p, replicate.seed)] = result.checkpoint_path
    return checkpoints


def run_cell(
    cfg: RunConfig,
    cell: AblationCell,
    manifest: Path,
    out_dir: Path,
    pretrained: Optional[Path],
    device: str = "cpu",
) -> Dict:
    """Fine-tune then evaluate one grid cell; returns its results row"""
    cell_dir = Path(out_dir) / cell.dirname / f"seed{cfg.seed}_{'ssl' if pretrained else 'scratch'}"
    spec = cfg.decoder.model_copy(update={"kind": cell.decoder, "upsample_mode": cell.upsample_mode})
    ft_cfg = cfg.finetune_config(pretrained_checkpoint=str(pretrained) if pretrained else None)
    ft_cfg = ft_cfg.model_copy(update={"decoder": spec})
    encoder_cfg = cfg.encoder.to_config(patch_size=cell.patch_size, name=cell.encoder)

    train = load_split(manifest, "finetune")
    dev = load_split(manifest, cfg.eval.calibration_split)
    test = load_split(manifest, cfg.eval.test_split)
    logger.info(f"{cell.tag} seed {cfg.seed} fine-tuning ({'pre-trained' if pretrained else 'from scratch'})")
    result = finetune(train, dev, encoder_cfg, ft_cfg, cell_dir, device=device)
    report = evaluate_checkpoint(result.checkpoint_path, test, cfg.eval, cell_dir, seed=cfg.seed, device=device)
    summary = report_summary(report)
    logger.info(f"{cell.tag} Dice {summary['dice']:.3f} [{summary['dice_lo']:.3f}; {summary['dice_hi']:.3f}]")
    return {
        "decoder": cell.decoder.value,
        "encoder": cell.encoder,
        "patch_size": cell.patch_size,
        "upsample_mode": cell.upsample_mode.value,
        **{k: summary[k] for k in ("dice", "dice_lo", "dice_hi", "precision", "recall", "volume_diff", "threshold_note")},
        "pretrained": pretrained is not None,
        "seed": cfg.seed,
        "checkpoint": str(result.checkpoint_path),
    }


def _run_cell_job(args) -> Dict:
    return run_cell(*args)


def summarize_seeds(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean over replicate seeds per cell and encoder initialisation; dice_sd is 0 for a single seed"""
    metrics = ("dice", "dice_lo", "dice_hi", "precision", "recall", "volume_diff")
    frame = frame.assign(**{c: pd.to_numeric(frame[c]) for c in metrics})
    grouped = frame.groupby(CELL_KEYS, sort=True)
    summary = grouped.agg(
        n_seeds=("seed", "nunique"),
        dice=("dice", "mean"),
        dice_sd=("dice", "std"),
        dice_lo=("dice_lo", "mean"),
        dice_hi=("dice_hi", "mean"),
        precision=("precision", "mean"),
        recall=("recall", "mean"),
        volume_diff=("volume_diff", "mean"),
    ).reset_index()
    summary["dice_sd"] = summary["dice_sd"].fillna(0.0)
    return summary[SUMMARY_COLUMNS]


def plot_dice_vs_patch_size(summary: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for (decoder, encoder, mode, pretrained), group in summary.groupby(
        ["decoder", "encoder", "upsample_mode", "pretrained"], sort=True
    ):
        group = group.sort_values("patch_size")
        err = [group["dice"] - group["dice_lo"], group["dice_hi"] - group["dice"]]
        ax.errorbar(group["patch_size"], group["dice"], yerr=err, marker="o", capsize=3,
                    linestyle="-" if pretrained else "--",
                    label=f"{decoder} {encoder} {mode}{'' if pretrained else ' scratch'}")
    ax.set_xscale("log", base=2)
    ax.set_xticks(sorted(summary["patch_size"].unique()))
    ax.get_xaxis().set_major_formatter(ScalarFormatter())
    ax.set_xlabel("patch size p")
    ax.set_ylabel("test Dice (mean over seeds)")
    ax.legend(fontsize="x-small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def run_ablation(cfg: RunConfig, manifest: Path, out_dir: Path, device: str = "cpu") -> Tuple[Path, pd.DataFrame]:
    """Runs the grid; writes results.csv (one row per cell, seed and initialisation), summary.csv and the plot"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = [AblationCell(*c) for c in cfg.ablate.cells()]
    replicates = replicate_configs(cfg)
    backbones = pretrain_backbones(cfg, manifest, out_dir, device) if cfg.ablate.pretrain else {}
    jobs = [
        (
            replicate, cell, Path(manifest), out_dir,
            backbones[(cell.encoder, cell.patch_size, replicate.seed)] if pretrained else None,
            device,
        )
        for replicate in replicates
        for pretrained in cfg.ablate.init_modes()
        for cell in cells
    ]
    logger.info(
        f"[ablate] {len(cells)} cells x {len(replicates)} seed(s) x {len(cfg.ablate.init_modes())} "
        f"initialisation(s) = {len(jobs)} runs, {cfg.ablate.workers} worker(s)"
    )

    if cfg.ablate.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.ablate.workers) as pool:
            rows: List[Dict] = list(pool.map(_run_cell_job, jobs))
    else:
        rows = [_run_cell_job(job) for job in jobs]

    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    csv_path = out_dir / RESULTS_FILE
    frame.to_csv(csv_path, index=False)
    summary = summarize_seeds(frame)
    summary.to_csv(out_dir / SUMMARY_FILE, index=False)
    plot_dice_vs_patch_size(summary, out_dir / PLOT_FILE)
    return csv_path, frame
