"""
Fixed 3D sin-cos positional encodings.

The embedding dimension D is split into three equal per-axis blocks of
2 * (D // 6) channels (x, then y, then z). Each block interleaves sin (even
channels) and cos (odd channels) over geometric frequencies 1 / 10000^(2i/d).
Channels left over when D is not a multiple of 6 are zero.
"""
from functools import lru_cache
from typing import Tuple

import numpy as np
import torch

from app.schemas.volume import PositionTable
from app.utils.exceptions import ConfigError


def axis_channels(embed_dim: int) -> int:
    per_axis = 2 * (embed_dim // 6)
    if per_axis == 0:
        raise ConfigError(
            f"embed_dim {embed_dim} is too small for a 3D sin-cos encoding (needs >= 6)",
            details={"embed_dim": embed_dim},
        )
    return per_axis


def sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """(N,) positions -> (N, dim) interleaved sin/cos encoding; dim must be even"""
    omega = np.arange(dim // 2, dtype=np.float64)
    omega /= dim / 2.0
    omega = 1.0 / 10000 ** omega
    out = np.outer(positions.astype(np.float64), omega)
    emb = np.empty((positions.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(out)
    emb[:, 1::2] = np.cos(out)
    return emb


def grid_positions(grid_dims: Tuple[int, int, int]) -> np.ndarray:
    """(N, 3) integer (i, j, k) positions in z-major token order"""
    gx, gy, gz = grid_dims
    k, j, i = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    return np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)


def encode_positions(positions: np.ndarray, embed_dim: int) -> np.ndarray:
    """Encode arbitrary (N, 3) grid positions; independent of the grid extent"""
    per_axis = axis_channels(embed_dim)
    table = np.zeros((positions.shape[0], embed_dim), dtype=np.float64)
    for axis in range(3):
        table[:, axis * per_axis:(axis + 1) * per_axis] = sincos_1d(positions[:, axis], per_axis)
    return table


def sincos_positional_encoding_3d(grid_dims: Tuple[int, int, int], embed_dim: int) -> PositionTable:
    encodings = encode_positions(grid_positions(grid_dims), embed_dim).astype(np.float32)
    return PositionTable(encodings=encodings, grid_dims=tuple(grid_dims))


@lru_cache(maxsize=64)
def _cached_table(grid_dims: Tuple[int, int, int], embed_dim: int) -> np.ndarray:
    table = sincos_positional_encoding_3d(grid_dims, embed_dim).encodings
    table.setflags(write=False)
    return table


def position_tensor(grid_dims: Tuple[int, int, int], embed_dim: int, device=None) -> torch.Tensor:
    """(1, N, D) float tensor for use inside models"""
    table = _cached_table(tuple(int(g) for g in grid_dims), int(embed_dim))
    return torch.from_numpy(table.copy()).unsqueeze(0).to(device)
