"""
Patient-level dataset splitting with manufacturer stratification.
"""
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas.data import DatasetManifest, ManifestEntry
from app.utils.exceptions import ConfigError, ManifestError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("splits")

SPLITS = ("train", "dev", "test")
MIN_PATIENTS = 10


def largest_remainder(total: int, fractions: Sequence[float]) -> List[int]:
    """Integer counts summing to total, closest to total * fractions"""
    raw = [total * f for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _check_fractions(fractions: Sequence[float]) -> Tuple[float, float, float]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(
            f"split fractions must be three non-negative values, got {list(fractions)}",
            details={"fractions": list(fractions)},
        )
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(
            f"split fractions sum to {sum(fractions)}, expected 1",
            details={"fractions": list(fractions)},
        )
    return tuple(float(f) for f in fractions)


def _assign_patients(
    strata: Dict[str, List[str]],
    fractions: Tuple[float, float, float],
    targets: List[int],
) -> Dict[str, str]:
    """Greedy balancing: each patient goes to the split (with room) furthest below its stratum share"""
    room = list(targets)
    assignment: Dict[str, str] = {}
    assigned = {key: [0, 0, 0] for key in strata}
    # interleave strata so global room only binds on the last few patients
    order = sorted(
        ((rank + 0.5) / len(members), key, rank)
        for key, members in strata.items()
        for rank in range(len(members))
    )
    for _, key, rank in order:
        seen = rank + 1
        counts = assigned[key]
        candidates = [i for i in range(3) if room[i] > 0]
        best = max(candidates, key=lambda i: (fractions[i] * seen - counts[i], -i))
        counts[best] += 1
        room[best] -= 1
        assignment[strata[key][rank]] = SPLITS[best]
    return assignment


def exclude_empty_annotations(manifest: DatasetManifest) -> Tuple[DatasetManifest, List[str]]:
    """Drop dev/test series whose annotation is known to be empty"""
    kept, dropped = [], []
    for e in manifest.entries:
        if e.split in ("dev", "test") and e.foreground_voxels == 0:
            dropped.append(e.case_id)
        else:
            kept.append(e)
    if dropped:
        logger.warning(f"[splits] excluded {len(dropped)} empty-annotation dev/test series: {dropped[:5]}")
    return DatasetManifest(entries=kept), dropped


def refill_finetune(manifest: DatasetManifest, seed: int = 0) -> Tuple[DatasetManifest, List[Tuple[str, Optional[str]]]]:
    """Swap fine-tune series whose rendered annotation is empty for annotated pre-train series.

    Returns the manifest and (dropped, replacement) pairs; replacement is None when no
    annotated pre-train series is left, in which case the fine-tune set shrinks.
    """
    rng = np.random.default_rng([seed, 11])
    entries = list(manifest.entries)
    empty = [i for i, e in enumerate(entries) if e.split == "finetune" and e.foreground_voxels == 0]
    spare = [i for i, e in enumerate(entries) if e.split == "pretrain" and (e.foreground_voxels or 0) > 0]
    swaps: List[Tuple[str, Optional[str]]] = []
    for i in empty:
        entries[i] = entries[i].model_copy(update={"split": "pretrain"})
        if spare:
            j = spare.pop(int(rng.integers(len(spare))))
            entries[j] = entries[j].model_copy(update={"split": "finetune"})
            swaps.append((entries[i].case_id, entries[j].case_id))
        else:
            swaps.append((entries[i].case_id, None))
    if swaps:
        shrunk = [a for a, b in swaps if b is None]
        logger.warning(
            f"[splits] {len(swaps)} fine-tune series rendered with an empty annotation were swapped out"
            + (f"; no annotated replacement for {shrunk}" if shrunk else "")
        )
    return DatasetManifest(entries=entries), swaps


def split_by_patient(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    finetune_fraction: float = 0.1,
    strat_key: str = "manufacturer",
    seed: int = 0,
    finetune_count: Optional[int] = None,
) -> DatasetManifest:
    """Assign split tags so that train/dev/test are patient-disjoint and manufacturer-balanced.

    Train patients keep all their series (tagged pretrain, with a finetune subset);
    dev and test keep one series per patient.
    """
    fractions = _check_fractions(fractions)
    if not 0.0 <= finetune_fraction <= 1.0:
        raise ConfigError(f"finetune fraction {finetune_fraction} outside [0, 1]")
    rng = np.random.default_rng(seed)

    series: Dict[str, List[ManifestEntry]] = defaultdict(list)
    for entry in manifest.entries:
        series[entry.patient_id].append(entry)
    patients = sorted(series)
    if len(patients) < MIN_PATIENTS:
        raise ManifestError(
            f"splitting needs at least {MIN_PATIENTS} patients, got {len(patients)}",
            details={"patients": len(patients)},
        )

    strata: Dict[str, List[str]] = defaultdict(list)
    for patient in patients:
        strata[str(getattr(series[patient][0], strat_key))].append(patient)
    for key in strata:
        strata[key] = [strata[key][i] for i in rng.permutation(len(strata[key]))]

    targets = largest_remainder(len(patients), fractions)
    assignment = _assign_patients(strata, fractions, targets)

    entries: List[ManifestEntry] = []
    dropped_series = 0
    for patient in patients:
        split = assignment[patient]
        rows = series[patient]
        if split == "train":
            entries.extend(e.model_copy(update={"split": "pretrain"}) for e in rows)
            continue
        annotated = [e for e in rows if e.foreground_voxels is None or e.foreground_voxels > 0] or rows
        chosen = annotated[int(rng.integers(len(annotated)))]
        dropped_series += len(rows) - 1
        entries.append(chosen.model_copy(update={"split": split}))
    if dropped_series:
        logger.info(f"[splits] dropped {dropped_series} extra dev/test series (one series per patient)")

    train_idx = [i for i, e in enumerate(entries) if e.split == "pretrain"]
    n_finetune = finetune_count if finetune_count is not None else round(finetune_fraction * len(train_idx))
    if n_finetune > len(train_idx):
        raise ConfigError(
            f"{n_finetune} fine-tune cases requested but only {len(train_idx)} training series exist",
            details={"finetune": n_finetune, "train_series": len(train_idx)},
        )
    labeled = [i for i in train_idx if entries[i].foreground_voxels != 0]
    pool = labeled if len(labeled) >= n_finetune else train_idx
    for i in rng.choice(pool, size=n_finetune, replace=False):
        entries[int(i)] = entries[int(i)].model_copy(update={"split": "finetune"})

    result, _ = exclude_empty_annotations(DatasetManifest(entries=entries))
    result.validate_invariants()
    counts = {s: len(p) for s, p in result.patients_by_split().items()}
    logger.info(
        f"[splits] patients train/dev/test = {counts['train']}/{counts['dev']}/{counts['test']}, "
        f"fine-tune series = {n_finetune}"
    )
    return result


def stratum_proportions(manifest: DatasetManifest, strat_key: str = "manufacturer") -> Dict[str, Dict[str, float]]:
    """Per split, the share of patients in each stratum"""
    out: Dict[str, Dict[str, float]] = {}
    groups: Dict[str, Dict[str, str]] = defaultdict(dict)
    for e in manifest.entries:
        split = "train" if e.split in ("pretrain", "finetune") else e.split
        groups[split][e.patient_id] = str(getattr(e, strat_key))
    for split, members in groups.items():
        values = list(members.values())
        out[split] = {k: values.count(k) / len(values) for k in sorted(set(values))}
    return out
