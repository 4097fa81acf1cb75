#!/usr/bin/env python3
"""
Tests for masked-autoencoder targets, loss, model and the pre-training loop
"""
import math
import os
import shutil
import sys
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pytest
import torch

from app.core.volume import patchify_tensor, unpatchify_tensor
from app.models.encoder import build_encoder
from app.models.mae import MaskedAutoencoder3D, mae_loss, normalize_patch_targets
from app.schemas.data import PhantomConfig
from app.schemas.model import EncoderConfig, MAEDecoderConfig
from app.schemas.training import LRSchedule, PretrainRunConfig
from app.schemas.volume import Volume
from app.services.phantom import generate_phantom
from app.services.pretrain import (
    LAST_CHECKPOINT,
    LOSS_LOG,
    epoch_checkpoint_name,
    load_mae,
    pretrain,
    reconstruction_correlation,
)
from app.utils.checkpoint import load_checkpoint, state_checksum
from app.utils.exceptions import ConfigError, FingerprintMismatchError, NonFiniteLossError, ShapeError
from app.utils.response import JsonlWriter

TINY = EncoderConfig(name="tiny", embed_dim=24, depth=4, num_heads=2, patch_size=4)
TINY_MAE = MAEDecoderConfig(depth=1, num_heads=2)


def _volumes(n=4, dims=(16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return [
        Volume(data=rng.normal(40.0, 300.0, dims).astype(np.float32), spacing=(1.0, 1.0, 1.0), id=f"vol-{i}")
        for i in range(n)
    ]


def _run_cfg(**overrides):
    values = dict(
        mask_ratio=0.75,
        epochs=3,
        batch_size=2,
        seed=0,
        checkpoint_every=1,
        schedule=LRSchedule(base_lr=1e-3, scale_with_batch=False, warmup_fraction=0.2),
    )
    values.update(overrides)
    return PretrainRunConfig(**values)


def test_normalize_patch_targets_example():
    out = normalize_patch_targets(np.array([[1.0, 3.0]]), eps=0.0)
    np.testing.assert_array_equal(out, [[-1.0, 1.0]])
    t = normalize_patch_targets(torch.tensor([[1.0, 3.0]]), eps=0.0)
    torch.testing.assert_close(t, torch.tensor([[-1.0, 1.0]]))


def test_constant_patch_normalizes_to_zero():
    out = normalize_patch_targets(np.full((2, 8), 5.0))
    np.testing.assert_array_equal(out, 0.0)


def test_normalized_patches_have_zero_mean_unit_variance():
    rng = np.random.default_rng(0)
    out = normalize_patch_targets(rng.normal(3.0, 5.0, (10, 64)))
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=1), 1.0, rtol=1e-6)


def test_mae_loss_examples():
    gen = torch.Generator().manual_seed(0)
    target = torch.randn(2, 6, 8, generator=gen)
    mask = torch.tensor([[1, 0, 1, 0, 0, 1], [0, 0, 1, 1, 0, 0]], dtype=torch.float32)

    assert mae_loss(target.clone(), target, mask).item() == 0.0
    assert mae_loss(target + 1.0, target, torch.ones(2, 6)).item() == pytest.approx(1.0)

    # errors on visible tokens are ignored
    pred = target.clone()
    pred[mask == 0] += 100.0
    assert mae_loss(pred, target, mask).item() == 0.0


def test_mae_loss_matches_brute_force():
    gen = torch.Generator().manual_seed(1)
    pred = torch.randn(3, 5, 8, generator=gen, dtype=torch.float64)
    target = torch.randn(3, 5, 8, generator=gen, dtype=torch.float64)
    mask = (torch.rand(3, 5, generator=gen) > 0.4).double()
    mask[0, 0] = 1.0
    total, count = 0.0, 0
    for b in range(3):
        for n in range(5):
            if mask[b, n]:
                total += float(((pred[b, n] - target[b, n]) ** 2).mean())
                count += 1
    assert mae_loss(pred, target, mask).item() == pytest.approx(total / count, rel=1e-12)


def test_mae_loss_rejects_bad_input():
    x = torch.zeros(1, 4, 8)
    with pytest.raises(ConfigError):
        mae_loss(x, x, torch.zeros(1, 4))
    with pytest.raises(ShapeError):
        mae_loss(x, torch.zeros(1, 4, 7), torch.ones(1, 4))
    with pytest.raises(ShapeError):
        mae_loss(x, x, torch.ones(1, 5))


def test_mae_loss_gradient_only_on_masked_tokens():
    gen = torch.Generator().manual_seed(2)
    target = torch.randn(1, 6, 8, generator=gen, dtype=torch.float64)
    pred = torch.randn(1, 6, 8, generator=gen, dtype=torch.float64).requires_grad_(True)
    mask = torch.tensor([[1, 0, 0, 1, 1, 0]], dtype=torch.float64)
    mae_loss(pred, target, mask).backward()
    grad = pred.grad
    assert torch.all(grad[mask == 0] == 0)

    h = 1e-6
    for n, d in ((0, 0), (3, 5), (4, 7)):
        with torch.no_grad():
            plus = pred.detach().clone()
            minus = pred.detach().clone()
            plus[0, n, d] += h
            minus[0, n, d] -= h
            fd = (mae_loss(plus, target, mask) - mae_loss(minus, target, mask)).item() / (2 * h)
        assert abs(fd - grad[0, n, d].item()) <= 1e-4 * max(abs(fd), 1e-8)


def test_full_model_loss_gradient_reaches_masked_predictions_only():
    # lightest model the decoder constraint allows: 2-block encoder, 1-block decoder, 2^3 grid
    encoder_cfg = EncoderConfig(name="grad", embed_dim=12, depth=2, num_heads=2, patch_size=2)
    model = MaskedAutoencoder3D(
        build_encoder(encoder_cfg, init_seed=0), MAEDecoderConfig(embed_dim=6, depth=1, num_heads=2)
    ).double().eval()
    volumes = torch.rand(1, 1, 4, 4, 4, generator=torch.Generator().manual_seed(4), dtype=torch.float64) * 2 - 1
    out = model(volumes, 0.75, torch.Generator().manual_seed(5))
    out.pred.retain_grad()
    out.loss.backward()
    grad = out.pred.grad
    masked = out.mask[0].bool()
    assert int(masked.sum()) == 6
    assert torch.all(grad[0, ~masked] == 0)
    assert torch.all(grad[0, masked].abs().sum(dim=-1) > 0)

    pred = out.pred.detach()
    target = out.target.detach()
    h = 1e-6
    for n in torch.nonzero(masked).flatten().tolist()[:3]:
        for d in (0, 7):
            plus = pred.clone()
            minus = pred.clone()
            plus[0, n, d] += h
            minus[0, n, d] -= h
            fd = (mae_loss(plus, target, out.mask) - mae_loss(minus, target, out.mask)).item() / (2 * h)
            assert abs(fd - grad[0, n, d].item()) <= 1e-4 * max(abs(fd), 1e-8)


def test_mae_forward_shapes():
    model = MaskedAutoencoder3D(build_encoder(TINY, init_seed=0), TINY_MAE)
    volumes = torch.rand(2, 1, 8, 8, 8, generator=torch.Generator().manual_seed(0)) * 2 - 1
    out = model(volumes, 0.75, torch.Generator().manual_seed(0))
    assert out.pred.shape == (2, 8, 64)
    assert out.target.shape == (2, 8, 64)
    assert torch.all(out.mask.sum(dim=1) == 6)
    assert torch.isfinite(out.loss)


def test_masked_voxels_are_invisible_to_the_model():
    model = MaskedAutoencoder3D(build_encoder(TINY, init_seed=0), TINY_MAE).eval()
    volumes = torch.rand(1, 1, 8, 8, 8, generator=torch.Generator().manual_seed(3)) * 2 - 1
    with torch.no_grad():
        first = model(volumes, 0.75, torch.Generator().manual_seed(9))
        patches = patchify_tensor(volumes, 4)
        patches[first.mask.bool()] = 0.5
        altered = unpatchify_tensor(patches, (2, 2, 2), 4)
        second = model(altered, 0.75, torch.Generator().manual_seed(9))
    assert torch.equal(first.mask, second.mask)
    torch.testing.assert_close(first.pred, second.pred)


def test_full_length_schedule():
    cfg = PretrainRunConfig.full_length(batch_size=8)
    assert cfg.epochs == 800 and cfg.batch_size == 8
    assert cfg.mask_ratio == 0.9
    assert PretrainRunConfig.full_length(epochs=5).epochs == 5


def test_mae_decoder_must_be_lighter_than_encoder():
    encoder = build_encoder(TINY, init_seed=0)
    with pytest.raises(ConfigError):
        MaskedAutoencoder3D(encoder, MAEDecoderConfig(embed_dim=24, depth=1, num_heads=2))
    with pytest.raises(ConfigError):
        MaskedAutoencoder3D(encoder, MAEDecoderConfig(depth=4, num_heads=2))
    resolved = MAEDecoderConfig().resolve(EncoderConfig.from_name("ViTiac-S"))
    assert resolved.embed_dim == 192
    assert resolved.depth == 2


def test_pretrain_is_deterministic(tmp_path):
    volumes = _volumes()
    a = pretrain(volumes, TINY, TINY_MAE, _run_cfg(), tmp_path / "a")
    b = pretrain(volumes, TINY, TINY_MAE, _run_cfg(), tmp_path / "b")
    assert a.epoch_losses == b.epoch_losses
    assert len(a.epoch_losses) == 3
    state_a = load_checkpoint(a.checkpoint_path)["state_dict"]
    state_b = load_checkpoint(b.checkpoint_path)["state_dict"]
    assert state_checksum(state_a) == state_checksum(state_b)


def test_pretrain_writes_loss_log_and_checkpoints(tmp_path):
    result = pretrain(_volumes(), TINY, TINY_MAE, _run_cfg(epochs=2), tmp_path)
    records = JsonlWriter(tmp_path / LOSS_LOG).read()
    assert len(records) == 4  # 2 epochs x 2 steps
    assert set(records[0]) == {"epoch", "step", "loss", "lr", "wall_time"}
    assert (tmp_path / LAST_CHECKPOINT).exists()
    assert (tmp_path / epoch_checkpoint_name(1)).exists()
    payload = load_checkpoint(result.checkpoint_path, expected_kind="pretrain")
    assert payload["fingerprint"]["patch_size"] == 4
    assert payload["epoch"] == 2


def test_resumed_pretraining_matches_uninterrupted_run(tmp_path):
    volumes = _volumes()
    cfg = _run_cfg(epochs=4, checkpoint_every=2)
    full = pretrain(volumes, TINY, TINY_MAE, cfg, tmp_path / "full")

    resumed_dir = tmp_path / "resumed"
    shutil.copytree(tmp_path / "full", resumed_dir)
    resumed = pretrain(volumes, TINY, TINY_MAE, cfg, resumed_dir, resume_from=resumed_dir / epoch_checkpoint_name(2))

    assert resumed.epoch_losses == pytest.approx(full.epoch_losses, abs=1e-6)
    logged = [r["loss"] for r in JsonlWriter(resumed_dir / LOSS_LOG).read()]
    expected = [r["loss"] for r in JsonlWriter(tmp_path / "full" / LOSS_LOG).read()]
    assert logged == pytest.approx(expected, abs=1e-6)


def test_resume_refuses_other_patch_size(tmp_path):
    volumes = _volumes()
    first = pretrain(volumes, TINY, TINY_MAE, _run_cfg(epochs=1), tmp_path / "p4")
    other = TINY.model_copy(update={"patch_size": 8})
    with pytest.raises(FingerprintMismatchError):
        pretrain(volumes, other, TINY_MAE, _run_cfg(epochs=2), tmp_path / "p8", resume_from=first.checkpoint_path)


def test_non_finite_loss_names_the_batch(tmp_path, monkeypatch):
    monkeypatch.setattr("app.models.mae.mae_loss", lambda pred, target, mask: (pred * float("nan")).sum())
    with pytest.raises(NonFiniteLossError) as err:
        pretrain(_volumes(), TINY, TINY_MAE, _run_cfg(epochs=1), tmp_path)
    assert "vol-" in err.value.details["batch_id"]
    assert err.value.details["stage"] == "pretrain"


def test_pretrain_needs_volumes(tmp_path):
    with pytest.raises(ConfigError):
        pretrain([], TINY, TINY_MAE, _run_cfg(), tmp_path)


def test_checkpoint_reloads_into_identical_model(tmp_path):
    volumes = _volumes()
    result = pretrain(volumes, TINY, TINY_MAE, _run_cfg(epochs=1), tmp_path)
    model = load_mae(result.checkpoint_path)
    assert state_checksum(model) == state_checksum(load_checkpoint(result.checkpoint_path)["state_dict"])
    r = reconstruction_correlation(model, volumes, mask_ratio=0.75, seed=0)
    assert math.isfinite(r)
    again = reconstruction_correlation(model, volumes, mask_ratio=0.75, seed=0)
    assert again == r


@pytest.fixture(scope="module")
def phantom_pretrain_run(tmp_path_factory):
    """ViTiac-S, p=8, 30 epochs on 50 phantoms; phantoms 50-57 are held out"""
    cfg = PhantomConfig(dims=(64, 64, 32), noise_std=2.0, seed=0)
    volumes = [generate_phantom(cfg, i)[0] for i in range(58)]
    run_cfg = _run_cfg(
        epochs=30,
        batch_size=4,
        checkpoint_every=30,
        schedule=LRSchedule(base_lr=5e-4, scale_with_batch=False, warmup_fraction=0.05),
    )
    encoder_cfg = EncoderConfig.from_name("ViTiac-S", patch_size=8)
    result = pretrain(volumes[:50], encoder_cfg, MAEDecoderConfig(), run_cfg, tmp_path_factory.mktemp("benchmark"))
    return result, volumes[50:]


@pytest.mark.slow
def test_pretraining_halves_loss_on_fifty_phantoms(phantom_pretrain_run):
    result, _ = phantom_pretrain_run
    assert len(result.epoch_losses) == 30
    assert result.final_loss < 0.5 * result.initial_loss


@pytest.mark.slow
def test_reconstructions_correlate_with_targets_on_held_out_phantoms(phantom_pretrain_run):
    result, held_out = phantom_pretrain_run
    model = load_mae(result.checkpoint_path)
    assert reconstruction_correlation(model, held_out, mask_ratio=0.75, seed=1) > 0.3


def main():
    import inspect
    import tempfile
    from pathlib import Path

    print("🧪 Masked autoencoder tests")
    print("=" * 50)
    tests = [
        (name, fn) for name, fn in globals().items()
        if name.startswith("test_") and callable(fn) and not hasattr(fn, "pytestmark")
    ]
    results = {}
    for name, fn in tests:
        params = inspect.signature(fn).parameters
        if "monkeypatch" in params:
            print(f"⏭️  {name} (needs pytest)")
            continue
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
    print(f"📊 {passed}/{len(results)} passed")
    return 0 if passed == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
