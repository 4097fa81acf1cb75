"""
Annotation rule: circled 2D regions thresholded at 130 HU with single pixels discarded.
"""
from typing import Optional

import numpy as np
from scipy import ndimage

from app.schemas.data import AnnotationRule
from app.schemas.volume import Volume
from app.utils.exceptions import ShapeError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
TWENTY_SIX_CONNECTED = np.ones((3, 3, 3), dtype=bool)


def _drop_small_components(mask: np.ndarray, min_size: int, structure: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=structure)
    if count == 0:
        return mask
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def apply_annotation_rule(
    volume: Volume,
    regions: Optional[np.ndarray] = None,
    rule: Optional[AnnotationRule] = None,
) -> np.ndarray:
    """Binary mask = circled region AND HU >= threshold, minus components below the minimum size.

    `regions` is a boolean array in volume coordinates whose z-slices are the circled
    2D regions; None circles every slice completely.
    """
    rule = rule or AnnotationRule()
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if regions is None:
        regions = np.ones(data.shape, dtype=bool)
    regions = np.asarray(regions, dtype=bool)
    if regions.shape != data.shape:
        raise ShapeError(
            f"annotation regions {regions.shape} do not match volume {data.shape}",
            details={"regions": list(regions.shape), "volume": list(data.shape)},
        )

    mask = regions & (data >= rule.hu_threshold)
    if rule.min_component_size <= 1:
        return mask
    if not rule.per_slice:
        return _drop_small_components(mask, rule.min_component_size, TWENTY_SIX_CONNECTED)

    out = np.zeros_like(mask)
    for z in range(mask.shape[2]):
        if mask[:, :, z].any():
            out[:, :, z] = _drop_small_components(mask[:, :, z], rule.min_component_size, EIGHT_CONNECTED)
    return out
