"""
Synthetic head-CT-like phantoms: soft-tissue background, a skull band at one x edge,
a meandering intracranial artery and ellipsoidal calcified lesions in its wall.

Volumes are rendered at a fine z spacing and average-pooled to the sampled slice
thickness, so thick-slice phantoms carry realistic partial-volume effects.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from app.schemas.data import AnnotationRule, PhantomConfig
from app.schemas.volume import Volume
from app.services.annotation import apply_annotation_rule
from app.utils.exceptions import PhantomGenerationError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("phantom")

VESSEL_RADIUS_MM = 1.0
LESION_MARGIN_VOX = 2


@dataclass
class PhantomCase:
    volume: Volume
    gt: np.ndarray          # annotation rule on the clean volume inside the lesion region
    clean: np.ndarray       # pooled volume before noise
    region: np.ndarray      # circled region: lesion support dilated in-plane
    lesion_count: int


def _fine_factor(cfg: PhantomConfig, thickness: float) -> int:
    return int(np.clip(round(thickness / cfg.fine_slice_mm), 1, cfg.max_fine_factor))


def _vessel_centerline(rng: np.random.Generator, dims: Tuple[int, int, int], x_min: float) -> np.ndarray:
    """(Y, 3) centreline in (x, y, z) voxel units, running along y"""
    nx, ny, nz = dims
    y = np.arange(ny, dtype=np.float64)
    cx = rng.uniform(x_min + 0.25 * (nx - x_min), nx - 0.25 * (nx - x_min))
    cz = rng.uniform(0.35 * nz, 0.65 * nz)
    ax = rng.uniform(0.05, 0.15) * nx
    az = rng.uniform(0.05, 0.15) * nz
    fx, fz = rng.uniform(0.5, 1.5, size=2)
    px, pz = rng.uniform(0, 2 * np.pi, size=2)
    x = np.clip(cx + ax * np.sin(2 * np.pi * fx * y / ny + px), x_min, nx - 1)
    z = np.clip(cz + az * np.sin(2 * np.pi * fz * y / ny + pz), 0, nz - 1)
    return np.stack([x, y, z], axis=1)


def _soft_tissue(rng: np.random.Generator, shape: Tuple[int, int, int], cfg: PhantomConfig) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0)
    field /= field.std() + 1e-12
    return np.clip(cfg.tissue_hu_mean + cfg.tissue_hu_std * field, 0.0, 80.0)


def _place_lesions(
    rng: np.random.Generator,
    cfg: PhantomConfig,
    count: int,
    centerline: np.ndarray,
    spacing: Tuple[float, float, float],
    fine_shape: Tuple[int, int, int],
    x_min: int,
) -> List[Tuple[np.ndarray, np.ndarray, float]]:
    """Non-overlapping ellipsoids as (centre_mm, radii_mm, HU), within bounds and clear of the bone band"""
    sx, sy, sz = spacing
    extent = np.array(fine_shape) * np.array([sx, sy, sz])
    lesions: List[Tuple[np.ndarray, np.ndarray, float]] = []
    for lesion_idx in range(count):
        for _ in range(cfg.max_placement_retries):
            radii_vox = rng.uniform(*cfg.lesion_radius_vox, size=3)
            radii = radii_vox * sx
            anchor = centerline[rng.integers(len(centerline))] * np.array([sx, sy, sz])
            centre = anchor + rng.uniform(-VESSEL_RADIUS_MM, VESSEL_RADIUS_MM, size=3)
            lo = centre - radii
            hi = centre + radii
            if lo[0] < (x_min + LESION_MARGIN_VOX) * sx or np.any(lo < 0) or np.any(hi >= extent):
                continue
            if any(np.all(np.abs(centre - c) < radii + r) for c, r, _ in lesions):
                continue
            lesions.append((centre, radii, float(rng.uniform(*cfg.lesion_hu))))
            break
        else:
            raise PhantomGenerationError(
                f"could not place lesion {lesion_idx + 1}/{count} after {cfg.max_placement_retries} attempts",
                details={"lesion": lesion_idx, "count": count, "retries": cfg.max_placement_retries},
            )
    return lesions


def render_phantom(
    cfg: PhantomConfig,
    index: int,
    slice_thickness_mm: Optional[float] = None,
    lesion_count: Optional[int] = None,
    case_id: Optional[str] = None,
    patient_id: Optional[str] = None,
) -> PhantomCase:
    """Deterministic per (cfg.seed, index); overrides replace the sampled thickness / lesion count"""
    rng = np.random.default_rng([cfg.seed, index])
    nx, ny, nz = cfg.dims
    s_inplane = float(rng.uniform(*cfg.inplane_spacing_mm))
    thickness = float(rng.uniform(*cfg.slice_thickness_mm)) if slice_thickness_mm is None else float(slice_thickness_mm)
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1)) if lesion_count is None else lesion_count

    factor = _fine_factor(cfg, thickness)
    fine_shape = (nx, ny, nz * factor)
    fine_spacing = (s_inplane, s_inplane, thickness / factor)
    band = min(cfg.bone_band_vox, nx)

    clean_fine = _soft_tissue(rng, fine_shape, cfg)
    if band:
        clean_fine[:band] = rng.uniform(*cfg.bone_hu)

    centerline = _vessel_centerline(rng, fine_shape, x_min=band + LESION_MARGIN_VOX)
    seeds = np.zeros(fine_shape, dtype=bool)
    idx = np.round(centerline).astype(int)
    seeds[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    dist = ndimage.distance_transform_edt(~seeds, sampling=fine_spacing)
    clean_fine[dist <= VESSEL_RADIUS_MM] = cfg.vessel_hu

    lesions = _place_lesions(rng, cfg, count, centerline, fine_spacing, fine_shape, band)
    support_fine = np.zeros(fine_shape, dtype=bool)
    if lesions:
        coords = np.meshgrid(
            *(np.arange(n) * s for n, s in zip(fine_shape, fine_spacing)), indexing="ij", sparse=True
        )
        for centre, radii, hu in lesions:
            inside = sum(((c - m) / r) ** 2 for c, m, r in zip(coords, centre, radii)) <= 1.0
            clean_fine[inside] = hu
            support_fine |= inside

    clean = clean_fine.reshape(nx, ny, nz, factor).mean(axis=3)
    support = support_fine.reshape(nx, ny, nz, factor).any(axis=3)
    region = ndimage.binary_dilation(support, structure=np.ones((3, 3, 1), dtype=bool))

    noise = rng.standard_normal(cfg.dims)
    if cfg.noise_smoothing > 0:
        noise = ndimage.gaussian_filter(noise, sigma=cfg.noise_smoothing)
        noise /= noise.std() + 1e-12
    noisy = (clean + cfg.noise_std * noise).astype(np.float32)

    volume = Volume(
        data=noisy,
        spacing=(s_inplane, s_inplane, thickness),
        id=case_id or f"phantom-{cfg.seed}-{index:05d}",
        patient_id=patient_id or f"patient-{cfg.seed}-{index:05d}",
    )
    clean_volume = Volume(data=clean.astype(np.float32), spacing=volume.spacing, id=volume.id)
    gt = apply_annotation_rule(clean_volume, region, AnnotationRule())
    logger.debug(
        f"[phantom] {volume.id}: thickness={thickness:.2f}mm factor={factor} lesions={len(lesions)} "
        f"gt_voxels={int(gt.sum())}"
    )
    return PhantomCase(volume=volume, gt=gt, clean=clean.astype(np.float32), region=region, lesion_count=len(lesions))


def generate_phantom(cfg: PhantomConfig, index: int, **overrides) -> Tuple[Volume, np.ndarray]:
    case = render_phantom(cfg, index, **overrides)
    return case.volume, case.gt
