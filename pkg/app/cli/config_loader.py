"""
Run-config resolution: defaults < YAML file < --set flags < --seed / --device.

Every leaf of the resolved tree carries its source (default, file or flag); the
resolved config and its provenance are written to resolved_config.yaml in each
run directory, and that file can be passed back with --config to re-run.
"""
import copy
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from app.schemas.run import SEED_LEAVES, RunConfig
from app.utils.exceptions import ConfigError
from app.utils.rich_logger import get_rich_logger
from config.settings import settings

logger = get_rich_logger("config")

RESOLVED_CONFIG = "resolved_config.yaml"


def _leaves(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            out.update(_leaves(value, path + "."))
        else:
            out[path] = value
    return out


def _merge(dst: Dict[str, Any], src: Dict[str, Any], source: str, provenance: Dict[str, str], prefix: str = "") -> None:
    for key, value in src.items():
        path = f"{prefix}{key}"
        if key not in dst:
            raise ConfigError(f"unknown config key '{path}'", details={"key": path, "source": source})
        if isinstance(dst[key], dict) and dst[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' is a section, got {value!r}", details={"key": path})
            _merge(dst[key], value, source, provenance, path + ".")
            continue
        logger.debug(f"[config] {path} = {value!r} ({provenance.get(path, 'default')} -> {source})")
        dst[key] = value
        for leaf in (_leaves(value, path + ".") if isinstance(value, dict) and value else {path: value}):
            provenance[leaf] = source


def _set_path(tree: Dict[str, Any], dotted: str, value: Any) -> Dict[str, Any]:
    """{a: {b: value}} for 'a.b'"""
    node: Dict[str, Any] = {}
    out = node
    parts = dotted.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


def parse_override(text: str) -> Dict[str, Any]:
    """'section.key=value' with a YAML-typed value"""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{text}' is not of the form section.key=value", details={"override": text})
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"override '{text}' has an unparsable value: {e}", details={"override": text})
    return _set_path({}, key.strip(), value)


def read_config_file(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist", details={"path": str(path)})
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}", details={"path": str(path)})
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping", details={"path": str(path)})
    # a resolved_config.yaml from an earlier run
    if set(data) == {"config", "provenance"}:
        data = data["config"]
    return data


def load_run_config(
    config_path: Optional[Path] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    device: Optional[str] = None,
) -> RunConfig:
    tree = RunConfig(seed=settings.DEFAULT_SEED, device=settings.DEVICE).model_dump(mode="json")
    provenance = {path: "default" for path in _leaves(tree)}

    if config_path is not None:
        _merge(tree, read_config_file(config_path), "file", provenance)
    for text in overrides:
        _merge(tree, parse_override(text), "flag", provenance)
    if seed is not None:
        _merge(tree, {"seed": seed}, "flag", provenance)
    if device is not None:
        _merge(tree, {"device": device}, "flag", provenance)

    # component seeds left at their default follow the global seed
    for path in SEED_LEAVES:
        if provenance.get(path) == "default":
            section, _, leaf = path.rpartition(".")
            node = tree
            for part in section.split("."):
                node = node[part]
            node[leaf] = tree["seed"]
            provenance[path] = provenance["seed"]

    cfg = RunConfig.model_validate(copy.deepcopy(tree))
    cfg.provenance = provenance
    changed = sorted(p for p, s in provenance.items() if s != "default")
    logger.debug(f"[config] resolved; non-default leaves: {changed}")
    return cfg


def resolve_device(requested: str) -> str:
    if requested != "auto":
        return requested
    import torch

    return "cuda" if torch.cuda.is_available() else "cpu"


def write_resolved_config(cfg: RunConfig, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    tree = cfg.model_dump(mode="json")
    provenance = {path: cfg.source_of(path) for path in _leaves(tree)}
    path = run_dir / RESOLVED_CONFIG
    path.write_text(yaml.safe_dump({"config": tree, "provenance": provenance}, sort_keys=False))
    return path
