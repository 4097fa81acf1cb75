"""
Single-file checkpoints: weights keyed by canonical module path plus a JSON
config fingerprint linking fine-tuned models to their pre-training run.
"""
import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import torch
import torch.nn as nn

from app.schemas.model import EncoderConfig
from app.utils.exceptions import CheckpointError, FingerprintMismatchError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("checkpoint")

CHECKPOINT_FORMAT = "vitiac-seg/1"
STRUCTURAL_KEYS = ("patch_size", "embed_dim", "depth", "heads")


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def make_fingerprint(encoder_cfg: EncoderConfig, seed: int) -> Dict[str, Any]:
    return {**encoder_cfg.fingerprint_fields(), "seed": seed, "git": git_describe()}


def state_checksum(source: Union[nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """sha256 over tensors in sorted key order"""
    state = source.state_dict() if isinstance(source, nn.Module) else source
    digest = hashlib.sha256()
    for key in sorted(state):
        tensor = state[key]
        digest.update(key.encode())
        if isinstance(tensor, torch.Tensor):
            digest.update(tensor.detach().to("cpu").contiguous().numpy().tobytes())
        else:
            digest.update(repr(tensor).encode())
    return digest.hexdigest()


def save_checkpoint(
    path: Path,
    kind: str,
    model: nn.Module,
    fingerprint: Dict[str, Any],
    config: Dict[str, Any],
    **extra: Any,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "fingerprint": fingerprint,
        "fingerprint_json": json.dumps(fingerprint, sort_keys=True),
        "config": config,
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.debug(f"[checkpoint] saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Path, expected_kind: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist", details={"path": str(path)})
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}", details={"path": str(path)})
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint", details={"path": str(path)})
    if expected_kind and payload.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path} is a '{payload.get('kind')}' checkpoint, expected '{expected_kind}'",
            details={"path": str(path), "kind": payload.get("kind")},
        )
    return payload


def check_fingerprint(encoder_cfg: EncoderConfig, fingerprint: Dict[str, Any]) -> None:
    """Refuse a checkpoint whose encoder structure differs from the run's encoder"""
    expected = encoder_cfg.fingerprint_fields()
    if any(fingerprint.get(k) != expected[k] for k in STRUCTURAL_KEYS):
        raise FingerprintMismatchError(expected=expected, found=dict(fingerprint))


def encoder_state(state_dict: Mapping[str, torch.Tensor], prefix: str = "encoder.") -> Dict[str, torch.Tensor]:
    return {k[len(prefix):]: v for k, v in state_dict.items() if k.startswith(prefix)}
