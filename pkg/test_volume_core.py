#!/usr/bin/env python3
"""
Tests for patch tokenisation, padding, HU standardisation and positional encodings
"""
import os
import sys
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from app.core.positional import encode_positions, grid_positions, sincos_positional_encoding_3d
from app.core.volume import (
    crop_array,
    padding_for,
    patchify,
    patchify_tensor,
    standardize_hu,
    tokens_to_grid,
    unpatchify,
    unpatchify_tensor,
)
from app.schemas.volume import HU_FLOOR, PatchConfig, TokenSequence, Volume
from app.utils.exceptions import ConfigError, DimensionError, ShapeError


def _volume(dims, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(data=rng.normal(40.0, 300.0, dims).astype(np.float32), spacing=(0.5, 0.5, 1.0))


def _grid_index(n, grid_dims):
    gx, gy, _ = grid_dims
    return n % gx, (n // gx) % gy, n // (gx * gy)


def test_patchify_token_counts():
    """64^3 at p=4 gives 4096 tokens of 64 voxels"""
    seq = patchify(_volume((64, 64, 64)), PatchConfig(patch_size=4))
    assert seq.tokens.shape == (4096, 64)
    assert seq.grid_dims == (16, 16, 16)

    seq = patchify(_volume((8, 8, 16)), PatchConfig(patch_size=8))
    assert seq.tokens.shape == (2, 512)
    assert seq.grid_dims == (1, 1, 2)


def test_single_token_is_z_major_flattening():
    vol = _volume((16, 16, 16))
    seq = patchify(vol, PatchConfig(patch_size=16))
    assert seq.tokens.shape == (1, 4096)
    np.testing.assert_array_equal(seq.tokens[0], vol.data.transpose(2, 1, 0).ravel())


def test_token_order_matches_grid_position():
    vol = _volume((8, 12, 16), seed=3)
    p = 4
    seq = patchify(vol, PatchConfig(patch_size=p))
    for n in (0, 1, 5, seq.num_tokens - 1):
        i, j, k = _grid_index(n, seq.grid_dims)
        block = vol.data[i * p:(i + 1) * p, j * p:(j + 1) * p, k * p:(k + 1) * p]
        np.testing.assert_array_equal(seq.tokens[n], block.transpose(2, 1, 0).ravel())


@pytest.mark.parametrize("p", [4, 8, 16])
def test_patchify_round_trip_is_exact(p):
    vol = _volume((32, 32, 32), seed=p)
    np.testing.assert_array_equal(unpatchify(patchify(vol, PatchConfig(patch_size=p))), vol.data)


def test_swapping_tokens_swaps_blocks():
    vol = _volume((16, 16, 16), seed=1)
    p = 4
    seq = patchify(vol, PatchConfig(patch_size=p))
    a, b = 2, 37
    swapped = seq.tokens.copy()
    swapped[[a, b]] = swapped[[b, a]]
    out = unpatchify(TokenSequence(tokens=swapped, grid_dims=seq.grid_dims, patch_size=p))

    def block(arr, n):
        i, j, k = _grid_index(n, seq.grid_dims)
        return arr[i * p:(i + 1) * p, j * p:(j + 1) * p, k * p:(k + 1) * p]

    np.testing.assert_array_equal(block(out, a), block(vol.data, b))
    np.testing.assert_array_equal(block(out, b), block(vol.data, a))
    changed = np.argwhere(out != vol.data)
    assert len(changed) > 0
    touched = {tuple(int(c) // p for c in idx) for idx in changed}
    assert touched <= {_grid_index(a, seq.grid_dims), _grid_index(b, seq.grid_dims)}


def test_non_divisible_axis_without_padding_names_the_axis():
    with pytest.raises(DimensionError) as err:
        patchify(_volume((8, 8, 12)), PatchConfig(patch_size=8, pad=False))
    assert err.value.details["axis"] == "z"
    assert err.value.details["size"] == 12


def test_padding_is_symmetric_with_hu_floor():
    vol = _volume((13, 8, 8))
    padding = padding_for(vol.dims, 8)
    assert padding.before == (1, 0, 0)
    assert padding.after == (2, 0, 0)

    seq = patchify(vol, PatchConfig(patch_size=8))
    assert seq.grid_dims == (2, 1, 1)
    padded = unpatchify(seq)
    assert padded.shape == (16, 8, 8)
    assert np.all(padded[0] == HU_FLOOR)
    assert np.all(padded[-2:] == HU_FLOOR)
    np.testing.assert_array_equal(crop_array(padded, padding), vol.data)


def test_unpatchify_rejects_wrong_token_length():
    seq = TokenSequence(tokens=np.zeros((1, 100), dtype=np.float32), grid_dims=(1, 1, 1), patch_size=4)
    with pytest.raises(ShapeError):
        unpatchify(seq)


def test_tensor_patchify_matches_numpy():
    vol = _volume((16, 8, 12), seed=2)
    p = 4
    tokens = patchify_tensor(torch.from_numpy(vol.data)[None, None], p)
    expected = patchify(vol, PatchConfig(patch_size=p)).tokens
    np.testing.assert_array_equal(tokens[0].numpy(), expected)
    back = unpatchify_tensor(tokens, (4, 2, 3), p)
    np.testing.assert_array_equal(back[0, 0].numpy(), vol.data)


def test_tokens_to_grid_places_token_at_its_position():
    grid = (3, 2, 2)
    tokens = torch.arange(12, dtype=torch.float32).reshape(1, 12, 1)
    fmap = tokens_to_grid(tokens, grid)
    assert fmap.shape == (1, 1, 3, 2, 2)
    for n in range(12):
        i, j, k = _grid_index(n, grid)
        assert fmap[0, 0, i, j, k].item() == n


def test_standardize_hu_window():
    values = np.array([-3000.0, -1024.0, 512.0, 2048.0, 5000.0], dtype=np.float32)
    out = standardize_hu(values)
    np.testing.assert_array_equal(out, np.array([-1.0, -1.0, 0.0, 1.0, 1.0], dtype=np.float32))
    t = standardize_hu(torch.from_numpy(values))
    np.testing.assert_array_equal(t.numpy(), out)


def test_volume_rejects_bad_input():
    with pytest.raises(ValidationError):
        Volume(data=np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(ValidationError):
        Volume(data=np.zeros((4, 4)), spacing=(1.0, 1.0, 1.0))
    with pytest.raises(ValidationError):
        Volume(data=np.full((2, 2, 2), np.nan), spacing=(1.0, 1.0, 1.0))


def test_ingest_replaces_non_finite_with_floor():
    data = np.zeros((2, 2, 2), dtype=np.float32)
    data[0, 0, 0] = np.nan
    data[1, 1, 1] = np.inf
    vol = Volume.ingest(data, (1.0, 1.0, 1.0))
    assert vol.data[0, 0, 0] == HU_FLOOR
    assert vol.data[1, 1, 1] == HU_FLOOR
    assert vol.voxel_volume_mm3 == 1.0


def test_positional_encoding_at_origin():
    """sin(0) = 0 on even channels, cos(0) = 1 on odd channels"""
    table = sincos_positional_encoding_3d((1, 1, 1), 384).encodings
    assert table.shape == (1, 384)
    np.testing.assert_array_equal(table[0, 0::2], 0.0)
    np.testing.assert_array_equal(table[0, 1::2], 1.0)


def test_positional_encoding_range_and_uniqueness():
    table = sincos_positional_encoding_3d((16, 16, 16), 384).encodings
    assert table.shape == (4096, 384)
    assert table.min() >= -1.0 and table.max() <= 1.0
    assert len(np.unique(table, axis=0)) == 4096


def test_positional_encoding_independent_of_grid_extent():
    small = grid_positions((2, 3, 4))
    big = encode_positions(grid_positions((4, 4, 4)), 96)
    big_index = {tuple(pos): n for n, pos in enumerate(grid_positions((4, 4, 4)))}
    rows = [big_index[tuple(pos)] for pos in small]
    np.testing.assert_array_equal(encode_positions(small, 96), big[rows])


def test_positional_leftover_channels_are_zero():
    table = sincos_positional_encoding_3d((2, 2, 2), 10).encodings
    np.testing.assert_array_equal(table[:, 6:], 0.0)
    assert np.any(table[:, :6] != 0.0)
    with pytest.raises(ConfigError):
        sincos_positional_encoding_3d((2, 2, 2), 4)


def main():
    print("🧪 Volume core tests")
    print("=" * 50)
    tests = [
        (name, fn) for name, fn in globals().items()
        if name.startswith("test_") and callable(fn) and not hasattr(fn, "pytestmark")
    ]
    results = {}
    for name, fn in tests:
        try:
            fn()
            results[name] = True
            print(f"✅ {name}")
        except Exception as e:
            results[name] = False
            print(f"❌ {name}: {e}")
    print("\n" + "=" * 50)
    passed = sum(results.values())
    print(f"📊 {passed}/{len(results)} passed (parametrized tests run under pytest)")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
