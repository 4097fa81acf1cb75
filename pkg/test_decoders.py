#!/usr/bin/env python3
"""
Tests for upscaling blocks, the four segmentation decoders and feature-map dumps
"""
import json
import os
import sys
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
import torch
from PIL import Image
from pydantic import ValidationError

from app.core.volume import unpatchify_tensor
from app.models.decoders import convolution_parameters, default_taps, doubling_levels
from app.models.encoder import build_encoder
from app.models.mae import MaskedAutoencoder3D
from app.models.segmentation import build_segmentation_model
from app.models.upsampling import UpscaleBlock, UpscaleStage, phase_variance, set_identity_kernel
from app.schemas.model import DecoderKind, DecoderSpec, EncoderConfig, MAEDecoderConfig, UpsampleMode
from app.schemas.volume import Volume
from app.services.features import PROBABILITY_STAGE, available_stages, dump_feature_maps
from app.utils.checkpoint import state_checksum
from app.utils.exceptions import ConfigError, UnknownStageError

TINY_MAE = MAEDecoderConfig(depth=1, num_heads=2)


def tiny_encoder(patch_size: int) -> EncoderConfig:
    return EncoderConfig(name="tiny", embed_dim=24, depth=4, num_heads=2, patch_size=patch_size)


def spec_for(kind: DecoderKind, mode: UpsampleMode = UpsampleMode.NN_INTERP_CONV) -> DecoderSpec:
    return DecoderSpec(kind=kind, upsample_mode=mode, mae_decoder=TINY_MAE)


def all_cells():
    for kind in DecoderKind:
        modes = [UpsampleMode.NN_INTERP_CONV] if kind == DecoderKind.MAE_DEC else list(UpsampleMode)
        for mode in modes:
            yield kind, mode


def _input(dims=(16, 16, 16), seed=0, dtype=torch.float32):
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(1, 1, *dims, generator=gen) * 2 - 1).to(dtype)


@pytest.mark.parametrize("mode", list(UpsampleMode))
def test_upscale_block_doubles_every_axis(mode):
    block = UpscaleBlock(8, 5, mode)
    out = block(torch.randn(2, 8, 4, 3, 2))
    assert out.shape == (2, 5, 8, 6, 4)
    stage = UpscaleStage(8, 5, mode)
    assert stage(torch.randn(1, 8, 2, 2, 2)).shape == (1, 5, 4, 4, 4)


@pytest.mark.parametrize("mode", list(UpsampleMode))
def test_identity_kernel_is_nearest_neighbour(mode):
    block = UpscaleBlock(3, 3, mode)
    set_identity_kernel(block)
    x = torch.randn(1, 3, 2, 3, 4)
    expected = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
    with torch.no_grad():
        torch.testing.assert_close(block(x), expected, atol=1e-6, rtol=0)


def test_transposed_convolution_can_produce_checkerboard():
    block = UpscaleBlock(1, 1, UpsampleMode.TRANSPOSED)
    with torch.no_grad():
        block.conv.weight.zero_()
        block.conv.bias.zero_()
        block.conv.weight[0, 0, 0, 0, 0] = 1.0
        out = block(torch.ones(1, 1, 4, 4, 4))
    assert phase_variance(out) == pytest.approx(7.0 / 64.0)
    assert phase_variance(out) > 1e-3


def test_interpolation_convolution_keeps_constant_input_constant():
    torch.manual_seed(0)
    block = UpscaleBlock(4, 4, UpsampleMode.NN_INTERP_CONV)
    with torch.no_grad():
        out = block(torch.full((1, 4, 4, 4, 4), 0.5))
    assert phase_variance(out) < 1e-10
    flat = out.flatten(2)
    assert torch.all(flat.max(dim=2).values - flat.min(dim=2).values < 1e-5)


def test_doubling_levels_and_channel_schedule():
    assert [doubling_levels(p) for p in (2, 4, 8, 16)] == [1, 2, 3, 4]
    for bad in (1, 6, 12):
        with pytest.raises(ConfigError):
            doubling_levels(bad)
    spec = DecoderSpec()
    assert [spec.channels(384, level) for level in range(6)] == [256, 128, 64, 32, 16, 16]
    assert spec.channels(24, 0) == 24
    assert default_taps(12) == [2, 5, 8]
    assert default_taps(4) == [0, 1, 2]


@pytest.mark.parametrize("patch_size", [4, 8, 16])
def test_every_decoder_restores_input_shape(patch_size):
    x = _input()
    for kind, mode in all_cells():
        model = build_segmentation_model(tiny_encoder(patch_size), spec_for(kind, mode), init_seed=0).eval()
        with torch.no_grad():
            logits = model(x)
        assert logits.shape == x.shape, f"{kind.value}/{mode.value} p={patch_size}"
        assert torch.isfinite(logits).all()


def test_single_voxel_feature_maps_are_supported():
    # 16 x 16 x 16 at p = 16 is a single token
    x = _input()
    for kind in (DecoderKind.UNETR, DecoderKind.SFPN_UNET):
        model = build_segmentation_model(tiny_encoder(16), spec_for(kind), init_seed=0)
        model.train()
        logits = model(x)
        logits.sum().backward()
        assert logits.shape == x.shape


def test_zero_head_gives_zero_logits():
    x = _input(dims=(8, 8, 8))
    for kind, mode in all_cells():
        model = build_segmentation_model(tiny_encoder(4), spec_for(kind, mode), init_seed=0).eval()
        with torch.no_grad():
            model.decoder.head.weight.zero_()
            model.decoder.head.bias.zero_()
            assert torch.equal(model(x), torch.zeros_like(x))


def test_mae_decoder_path_has_no_convolutions():
    cfg = tiny_encoder(4)
    seg = build_segmentation_model(cfg, spec_for(DecoderKind.MAE_DEC), init_seed=0)
    assert convolution_parameters(seg.decoder) == []
    mae = MaskedAutoencoder3D(build_encoder(cfg, init_seed=0), TINY_MAE)
    assert convolution_parameters(mae.decoder) == []
    for kind in (DecoderKind.UNETR, DecoderKind.SFPN_UNET, DecoderKind.UPSCALE):
        assert convolution_parameters(build_segmentation_model(cfg, spec_for(kind), init_seed=0).decoder)


def test_mae_decoder_ignores_upsample_mode():
    cfg = tiny_encoder(4)
    a = build_segmentation_model(cfg, spec_for(DecoderKind.MAE_DEC, UpsampleMode.TRANSPOSED), init_seed=3)
    b = build_segmentation_model(cfg, spec_for(DecoderKind.MAE_DEC, UpsampleMode.NN_INTERP_CONV), init_seed=3)
    assert state_checksum(a.decoder) == state_checksum(b.decoder)


def test_segmentation_mae_decoder_starts_from_fresh_weights():
    cfg = tiny_encoder(4)
    encoder = build_encoder(cfg, init_seed=0)
    mae = MaskedAutoencoder3D(encoder, TINY_MAE)
    seg = build_segmentation_model(cfg, spec_for(DecoderKind.MAE_DEC), init_seed=0, encoder=encoder)
    assert seg.decoder.decoder.embed_dim == mae.decoder.embed_dim
    assert state_checksum(seg.decoder.decoder) != state_checksum(mae.decoder)


def test_token_logits_fill_exactly_their_block():
    grid, p = (2, 3, 2), 4
    for n in (0, 4, 11):
        tokens = torch.zeros(1, 12, p ** 3)
        tokens[0, n] = 1.0
        vol = unpatchify_tensor(tokens, grid, p)[0, 0]
        i, j, k = n % 2, (n // 2) % 3, n // 6
        expected = torch.zeros_like(vol)
        expected[i * p:(i + 1) * p, j * p:(j + 1) * p, k * p:(k + 1) * p] = 1.0
        assert torch.equal(vol, expected)


def test_unetr_configuration_errors():
    with pytest.raises(ConfigError):
        build_segmentation_model(tiny_encoder(4), DecoderSpec(kind=DecoderKind.UNETR, taps=[0, 9]))
    with pytest.raises(ValidationError):
        DecoderSpec(kind=DecoderKind.UNETR, taps=[2, 1])
    with pytest.raises(ConfigError) as err:
        build_segmentation_model(tiny_encoder(16), DecoderSpec(kind=DecoderKind.UNETR, taps=[0, 1]))
    assert err.value.details["patch_size"] == 16


def test_decoder_gradients_match_finite_differences():
    x = _input(dims=(8, 8, 8), seed=1, dtype=torch.float64)
    weights = _input(dims=(8, 8, 8), seed=2, dtype=torch.float64)
    rng = np.random.default_rng(0)
    h = 1e-6
    for kind in DecoderKind:
        model = build_segmentation_model(tiny_encoder(4), spec_for(kind), init_seed=0).double().train()
        model.zero_grad()
        (model(x) * weights).sum().backward()
        params = [(name, p) for name, p in model.decoder.named_parameters() if p.grad is not None]
        for _ in range(10):
            name, param = params[rng.integers(len(params))]
            flat = int(rng.integers(param.numel()))
            analytic = param.grad.reshape(-1)[flat].item()
            with torch.no_grad():
                original = param.reshape(-1)[flat].item()
                param.view(-1)[flat] = original + h
                plus = (model(x) * weights).sum().item()
                param.view(-1)[flat] = original - h
                minus = (model(x) * weights).sum().item()
                param.view(-1)[flat] = original
            numeric = (plus - minus) / (2 * h)
            err = abs(numeric - analytic)
            assert err <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7, f"{kind.value} {name}[{flat}]"


def test_feature_dump_writes_one_file_per_stage(tmp_path):
    model = build_segmentation_model(tiny_encoder(16), spec_for(DecoderKind.UPSCALE), init_seed=0)
    volume = Volume(data=np.random.default_rng(0).normal(40, 200, (16, 16, 16)).astype(np.float32),
                    spacing=(1.0, 1.0, 1.0), id="case-1")
    index = dump_feature_maps(model, volume, tmp_path)
    assert available_stages(model) == ["up1", "up2", "up3", PROBABILITY_STAGE]
    files = sorted(p.name for p in tmp_path.glob("*.png"))
    assert files == ["prob_16.png", "up1_2.png", "up2_4.png", "up3_8.png"]
    sizes = {e["stage"]: e["shape"] for e in index["stages"]}
    assert sizes["up1"] == [2, 2, 2] and sizes["up3"] == [8, 8, 8] and sizes[PROBABILITY_STAGE] == [16, 16, 16]
    assert Image.open(tmp_path / "up2_4.png").size == (4, 4)
    assert json.loads((tmp_path / "index.json").read_text())["decoder"] == "UPSCALE"


def test_feature_dump_of_constant_input_is_constant(tmp_path):
    model = build_segmentation_model(tiny_encoder(16), spec_for(DecoderKind.UPSCALE), init_seed=0)
    with torch.no_grad():
        model.encoder.norm.weight.zero_()
        model.encoder.norm.bias.fill_(0.5)
        # dyadic weights keep every sum exact
        for param in model.decoder.parameters():
            param.copy_(torch.round(param * 64) / 64)
    volume = Volume(data=np.full((16, 16, 16), 40.0, dtype=np.float32), spacing=(1.0, 1.0, 1.0), id="flat")
    index = dump_feature_maps(model, volume, tmp_path)
    for entry in index["stages"]:
        assert entry["variance"] < 1e-10, entry["stage"]
        assert entry["phase_variance"] < 1e-10, entry["stage"]


def test_feature_dump_stage_selection(tmp_path):
    model = build_segmentation_model(tiny_encoder(4), spec_for(DecoderKind.MAE_DEC), init_seed=0)
    volume = Volume(data=np.zeros((8, 8, 8), dtype=np.float32), spacing=(1.0, 1.0, 1.0), id="c")
    index = dump_feature_maps(model, volume, tmp_path, stages=["block0"])
    assert [e["stage"] for e in index["stages"]] == ["block0"]
    assert index["stages"][0]["scale"] == 1
    with pytest.raises(UnknownStageError) as err:
        dump_feature_maps(model, volume, tmp_path, stages=["up9"])
    assert "block0" in err.value.details["valid_stages"]


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ViTiac-S", "ViTiac-M", "ViTiac-L"])
@pytest.mark.parametrize("patch_size", [4, 8, 16])
def test_full_size_decoders_restore_input_shape(name, patch_size):
    x = _input(dims=(64, 64, 32))
    encoder_cfg = EncoderConfig.from_name(name, patch_size=patch_size)
    encoder = build_encoder(encoder_cfg, init_seed=0)
    for kind in DecoderKind:
        model = build_segmentation_model(encoder_cfg, DecoderSpec(kind=kind), init_seed=0, encoder=encoder).eval()
        with torch.no_grad():
            assert model(x).shape == x.shape


def main():
    import inspect
    import tempfile
    from pathlib import Path

    print("🧪 Decoder tests")
    print("=" * 50)
    tests = [
        (name, fn) for name, fn in globals().items()
        if name.startswith("test_") and callable(fn) and not hasattr(fn, "pytestmark")
    ]
    results = {}
    for name, fn in tests:
        params = inspect.signature(fn).parameters
        try:
            with tempfile.TemporaryDirectory() as tmp:
                fn(**({"tmp_path": Path(tmp)} if "tmp_path" in params else {}))
            results[name] = True
            print(f"✅ {name}")
        except Exception as e:
            results[name] = False
            print(f"❌ {name}: {e}")
    print("\n" + "=" * 50)
    passed = sum(results.values())
    print(f"📊 {passed}/{len(results)} passed (parametrized and slow tests run under pytest)")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
