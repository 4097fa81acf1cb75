import argparse
from pathlib import Path
from typing import Dict

from app.schemas.run import RunConfig
from app.services.features import dump_feature_maps
from app.services.inference import load_segmentation_model
from app.utils.exceptions import ManifestError
from app.utils.volume_io import read_manifest, read_volume, resolve_path

NAME = "dump_features"


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Write central-slice decoder feature maps of one case")
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--manifest", type=Path, required=True)
    parser.add_argument("--case-id", required=True)
    parser.add_argument("--stages", nargs="+", default=None, help="stage names (default: all)")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace, cfg: RunConfig, out_dir: Path, device: str) -> Dict:
    entries = [e for e in read_manifest(args.manifest).entries if e.case_id == args.case_id]
    if not entries:
        raise ManifestError(f"case {args.case_id} is not in {args.manifest}", details={"case_id": args.case_id})
    entry = entries[0]
    volume = read_volume(resolve_path(args.manifest, entry.path))
    volume = volume.model_copy(update={"id": entry.case_id, "patient_id": entry.patient_id})
    model, _ = load_segmentation_model(args.checkpoint, device=device)
    feature_dir = Path(out_dir) / "features" / entry.case_id
    index = dump_feature_maps(model, volume, feature_dir, stages=args.stages, device=device)
    return {"index": str(feature_dir / "index.json"), "stages": [s["stage"] for s in index["stages"]]}
