"""
Desk-scale phantom dataset: a patient roster, patient-level split, and the
rendered volumes / labels of every kept series written next to a manifest.
"""
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Tuple

import numpy as np

from app.schemas.data import DatasetManifest, ManifestEntry, PhantomConfig, SplitCounts
from app.services.phantom import render_phantom
from app.services.splits import exclude_empty_annotations, refill_finetune, split_by_patient
from app.utils.volume_io import write_manifest, write_mask, write_volume
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("phantom_dataset")

MANIFEST_NAME = "manifest.csv"


def phantom_roster(cfg: PhantomConfig, counts: SplitCounts) -> DatasetManifest:
    """Every patient gets `series_per_train_patient` series; manufacturer tags cycle over a seeded permutation"""
    rng = np.random.default_rng([cfg.seed, 7])
    n_patients = counts.train_patients + counts.dev_patients + counts.test_patients
    tags = [cfg.manufacturers[i % len(cfg.manufacturers)] for i in rng.permutation(n_patients)]
    entries = []
    index = 0
    for p in range(n_patients):
        patient_id = f"patient-{cfg.seed}-{p:04d}"
        for _ in range(counts.series_per_train_patient):
            case_id = f"phantom-{cfg.seed}-{index:05d}"
            entries.append(
                ManifestEntry(
                    case_id=case_id,
                    patient_id=patient_id,
                    path=f"volumes/{case_id}",
                    split="pretrain",
                    manufacturer=tags[p],
                )
            )
            index += 1
    return DatasetManifest(entries=entries)


def _case_index(case_id: str) -> int:
    return int(case_id.rsplit("-", 1)[1])


def _render_one(args: Tuple[PhantomConfig, ManifestEntry, Path, str]) -> ManifestEntry:
    cfg, entry, out_dir, suffix = args
    case = render_phantom(cfg, _case_index(entry.case_id), case_id=entry.case_id, patient_id=entry.patient_id)
    volume_rel = f"volumes/{entry.case_id}.{suffix}"
    label_rel = f"labels/{entry.case_id}.{suffix}"
    write_volume(case.volume, out_dir / volume_rel)
    write_mask(case.gt, case.volume.spacing, out_dir / label_rel, case_id=entry.case_id)
    return entry.model_copy(
        update={
            "path": volume_rel,
            "label_path": label_rel,
            "slice_thickness_mm": round(case.volume.spacing[2], 6),
            "foreground_voxels": int(case.gt.sum()),
        }
    )


def generate_dataset(
    cfg: PhantomConfig,
    counts: SplitCounts,
    out_dir: Path,
    volume_format: str = "nii.gz",
    workers: int = 1,
) -> Tuple[Path, DatasetManifest]:
    """Render the split roster to `out_dir`; returns the manifest path and manifest"""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    roster = phantom_roster(cfg, counts)
    total = counts.train_patients + counts.dev_patients + counts.test_patients
    fractions = (counts.train_patients / total, counts.dev_patients / total, counts.test_patients / total)
    split = split_by_patient(
        roster, fractions=fractions, strat_key="manufacturer", seed=cfg.seed, finetune_count=counts.finetune_cases
    )

    jobs = [(cfg, entry, out_dir, volume_format) for entry in split.entries]
    logger.info(f"[phantom] rendering {len(jobs)} phantoms to {out_dir} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rendered: List[ManifestEntry] = list(pool.map(_render_one, jobs))
    else:
        rendered = [_render_one(job) for job in jobs]

    manifest, _ = refill_finetune(DatasetManifest(entries=rendered), seed=cfg.seed)
    manifest, _ = exclude_empty_annotations(manifest)
    manifest.validate_invariants()
    return write_manifest(manifest, out_dir / MANIFEST_NAME), manifest
