"""
Patch tokenisation of 3D volumes.

Token order is z-major raster: token n sits at grid position (i, j, k) with
n = (k * gy + j) * gx + i. Voxels inside a token are flattened with the same
z-major order, so a token of a p^3 block b[x, y, z] is b.transpose(2, 1, 0).ravel().
"""
from typing import Tuple, Union

import numpy as np
import torch

from app.schemas.volume import HU_FLOOR, Padding, PatchConfig, TokenSequence, Volume
from app.utils.exceptions import DimensionError, ShapeError

AXES = ("x", "y", "z")

# Input standardisation window (HU)
HU_CLIP_MIN = -1024.0
HU_CLIP_MAX = 2048.0


def grid_dims_for(dims: Tuple[int, int, int], patch_size: int) -> Tuple[int, int, int]:
    for axis, size in zip(AXES, dims):
        if size % patch_size:
            raise DimensionError(axis, size, patch_size)
    return tuple(size // patch_size for size in dims)


def padding_for(dims: Tuple[int, int, int], patch_size: int) -> Padding:
    """Symmetric padding to the next multiple of patch_size (extra voxel goes after)"""
    before, after = [], []
    for size in dims:
        total = (-size) % patch_size
        before.append(total // 2)
        after.append(total - total // 2)
    return Padding(before=tuple(before), after=tuple(after), original_dims=tuple(dims))


def pad_array(data: np.ndarray, padding: Padding, value: float = HU_FLOOR) -> np.ndarray:
    if padding.is_identity:
        return data
    return np.pad(data, list(zip(padding.before, padding.after)), mode="constant", constant_values=value)


def crop_array(data: Union[np.ndarray, torch.Tensor], padding: Padding):
    """Crop the trailing three axes back to padding.original_dims"""
    if padding.is_identity:
        return data
    sl = tuple(
        slice(b, b + n) for b, n in zip(padding.before, padding.original_dims)
    )
    return data[(Ellipsis,) + sl]


def conform(volume: Volume, cfg: PatchConfig) -> Tuple[np.ndarray, Padding]:
    """Apply the padding policy; without padding, non-divisible dims raise DimensionError"""
    if not cfg.pad:
        grid_dims_for(volume.dims, cfg.patch_size)
        return volume.data, Padding(original_dims=volume.dims)
    padding = padding_for(volume.dims, cfg.patch_size)
    return pad_array(volume.data, padding), padding


def patchify(volume: Union[Volume, np.ndarray], cfg: PatchConfig) -> TokenSequence:
    """Split a volume into raw-voxel tokens of length p^3"""
    if isinstance(volume, Volume):
        data, _ = conform(volume, cfg)
    else:
        data = np.asarray(volume)
        if cfg.pad:
            data = pad_array(data, padding_for(data.shape, cfg.patch_size))
    p = cfg.patch_size
    gx, gy, gz = grid_dims_for(data.shape, p)
    blocks = data.reshape(gx, p, gy, p, gz, p).transpose(4, 2, 0, 5, 3, 1)
    tokens = np.ascontiguousarray(blocks).reshape(gx * gy * gz, p ** 3)
    return TokenSequence(tokens=tokens, grid_dims=(gx, gy, gz), patch_size=p)


def unpatchify(seq: TokenSequence) -> np.ndarray:
    """Exact inverse of patchify for raw-voxel tokens"""
    p = seq.patch_size
    gx, gy, gz = seq.grid_dims
    if seq.tokens.shape[1] != p ** 3:
        raise ShapeError(
            f"token length {seq.tokens.shape[1]} != patch volume {p ** 3}",
            details={"token_length": int(seq.tokens.shape[1]), "patch_size": p},
        )
    blocks = seq.tokens.reshape(gz, gy, gx, p, p, p).transpose(2, 5, 1, 4, 0, 3)
    return np.ascontiguousarray(blocks).reshape(gx * p, gy * p, gz * p)


def patchify_tensor(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, 1, X, Y, Z) -> (B, N, p^3), same order as patchify"""
    if x.dim() != 5 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, X, Y, Z), got {tuple(x.shape)}")
    p = patch_size
    b = x.shape[0]
    gx, gy, gz = grid_dims_for(tuple(x.shape[2:]), p)
    x = x.reshape(b, gx, p, gy, p, gz, p).permute(0, 5, 3, 1, 6, 4, 2)
    return x.reshape(b, gx * gy * gz, p ** 3)


def unpatchify_tensor(tokens: torch.Tensor, grid_dims: Tuple[int, int, int], patch_size: int) -> torch.Tensor:
    """(B, N, p^3) -> (B, 1, X, Y, Z), inverse of patchify_tensor"""
    p = patch_size
    gx, gy, gz = grid_dims
    b, n, d = tokens.shape
    if n != gx * gy * gz:
        raise ShapeError(f"token count {n} does not match grid {grid_dims}")
    if d != p ** 3:
        raise ShapeError(f"token length {d} != patch volume {p ** 3}")
    x = tokens.reshape(b, gz, gy, gx, p, p, p).permute(0, 3, 6, 2, 5, 1, 4)
    return x.reshape(b, 1, gx * p, gy * p, gz * p)


def tokens_to_grid(tokens: torch.Tensor, grid_dims: Tuple[int, int, int]) -> torch.Tensor:
    """(B, N, C) token features -> (B, C, gx, gy, gz) feature map"""
    gx, gy, gz = grid_dims
    b, n, c = tokens.shape
    if n != gx * gy * gz:
        raise ShapeError(f"token count {n} does not match grid {grid_dims}")
    return tokens.reshape(b, gz, gy, gx, c).permute(0, 4, 3, 2, 1).contiguous()


def standardize_hu(data: Union[np.ndarray, torch.Tensor]):
    """Clip to [-1024, 2048] HU and map linearly onto [-1, 1]"""
    span = HU_CLIP_MAX - HU_CLIP_MIN
    if isinstance(data, torch.Tensor):
        clipped = data.clamp(HU_CLIP_MIN, HU_CLIP_MAX)
    else:
        clipped = np.clip(data, HU_CLIP_MIN, HU_CLIP_MAX).astype(np.float32)
    return (clipped - HU_CLIP_MIN) / span * 2.0 - 1.0
