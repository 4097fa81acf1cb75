"""
Volume, mask and manifest file I/O.

Volumes are stored as NIfTI-1 (.nii / .nii.gz, via nibabel) or, as a fallback,
as little-endian float32 raw files with a JSON sidecar {dims, spacing, id}.
Headers are checked before nibabel touches a file so malformed or truncated
files fail with the byte offset where parsing stopped.
"""
import gzip
import json
import struct
from pathlib import Path
from typing import Optional, Union

import nibabel as nib
import numpy as np
import pandas as pd

from app.schemas.data import MANIFEST_COLUMNS, DatasetManifest, ManifestEntry
from app.schemas.volume import Volume
from app.utils.exceptions import ManifestError, VolumeParseError
from app.utils.rich_logger import get_rich_logger

logger = get_rich_logger("volume_io")

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC_OFFSET = 344
NIFTI_VOX_OFFSET = 108
NIFTI_MAGICS = (b"n+1\x00", b"ni1\x00")
RAW_DTYPE = np.dtype("<f4")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def _read_bytes(path: Path) -> bytes:
    try:
        if path.name.endswith(".gz"):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        # gzip stream cut short: report how far the compressed file got
        raise VolumeParseError(str(path), path.stat().st_size if path.exists() else 0, f"unreadable file: {e}")


def check_nifti_header(path: Path) -> None:
    """Validate sizeof_hdr, magic and payload length of a NIfTI-1 file"""
    raw = _read_bytes(path)
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeParseError(str(path), len(raw), f"header truncated ({len(raw)} of {NIFTI_HEADER_SIZE} bytes)")
    endian = None
    for candidate in ("<", ">"):
        if struct.unpack_from(f"{candidate}i", raw, 0)[0] == NIFTI_HEADER_SIZE:
            endian = candidate
            break
    if endian is None:
        raise VolumeParseError(str(path), 0, "sizeof_hdr is not 348")
    if raw[NIFTI_MAGIC_OFFSET:NIFTI_MAGIC_OFFSET + 4] not in NIFTI_MAGICS:
        raise VolumeParseError(str(path), NIFTI_MAGIC_OFFSET, "bad NIfTI-1 magic")

    dims = struct.unpack_from(f"{endian}8h", raw, 40)
    ndim = dims[0]
    if not 1 <= ndim <= 7 or any(d < 1 for d in dims[1:ndim + 1]):
        raise VolumeParseError(str(path), 40, f"invalid dim field {dims}")
    bitpix = struct.unpack_from(f"{endian}h", raw, 72)[0]
    vox_offset = int(struct.unpack_from(f"{endian}f", raw, NIFTI_VOX_OFFSET)[0])
    expected = vox_offset + int(np.prod(dims[1:ndim + 1])) * bitpix // 8
    if len(raw) < expected:
        raise VolumeParseError(
            str(path), len(raw), f"payload truncated: {len(raw)} bytes, header announces {expected}"
        )


def write_volume(volume: Volume, path: Union[str, Path], dtype=np.float32) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(volume.data, dtype=dtype)
    if _is_nifti(path):
        sx, sy, sz = volume.spacing
        img = nib.Nifti1Image(data, affine=np.diag([sx, sy, sz, 1.0]))
        img.header.set_zooms(volume.spacing)
        img.header.set_xyzt_units("mm")
        img.header["descrip"] = volume.id[:79].encode()
        img.header["aux_file"] = volume.patient_id[:23].encode()
        nib.save(img, str(path))
        return path

    path.write_bytes(np.asarray(volume.data, dtype=RAW_DTYPE).ravel(order="F").tobytes())
    sidecar = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "id": volume.id,
        "patient_id": volume.patient_id,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2))
    return path


def _read_raw(path: Path) -> Volume:
    side = sidecar_path(path)
    if not side.exists():
        raise VolumeParseError(str(side), 0, "raw volume has no JSON sidecar")
    try:
        meta = json.loads(side.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except json.JSONDecodeError as e:
        raise VolumeParseError(str(side), e.pos, f"malformed sidecar: {e.msg}")
    except (KeyError, TypeError, ValueError) as e:
        raise VolumeParseError(str(side), 0, f"sidecar missing dims/spacing: {e}")
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * RAW_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeParseError(
            str(path), min(len(payload), expected), f"payload has {len(payload)} bytes, dims need {expected}"
        )
    data = np.frombuffer(payload, dtype=RAW_DTYPE).reshape(dims, order="F").astype(np.float32)
    return Volume.ingest(data, spacing, id=meta.get("id", path.stem), patient_id=meta.get("patient_id", "patient"))


def read_volume(path: Union[str, Path]) -> Volume:
    """Read a NIfTI-1 or raw+sidecar volume; never returns a partially read volume"""
    path = Path(path)
    if not path.exists():
        raise VolumeParseError(str(path), 0, "file does not exist")
    if not _is_nifti(path):
        return _read_raw(path)

    check_nifti_header(path)
    try:
        img = nib.load(str(path))
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as e:
        raise VolumeParseError(str(path), 0, f"nibabel could not read the file: {e}")
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeParseError(str(path), 40, f"expected a 3D volume, got shape {data.shape}")
    header = img.header
    spacing = tuple(float(z) for z in header.get_zooms()[:3])
    descrip = header["descrip"].item().decode(errors="replace") or path.stem
    aux = header["aux_file"].item().decode(errors="replace") or "patient"
    return Volume.ingest(data, spacing, id=descrip, patient_id=aux)


def write_mask(mask: np.ndarray, spacing, path: Union[str, Path], case_id: str = "mask") -> Path:
    volume = Volume(data=np.asarray(mask, dtype=np.uint8), spacing=tuple(spacing), id=case_id)
    return write_volume(volume, path, dtype=np.uint8)


def read_mask(path: Union[str, Path]) -> np.ndarray:
    return read_volume(path).data > 0.5


def write_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [e.model_dump() for e in manifest.entries]
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    frame["foreground_voxels"] = frame["foreground_voxels"].astype("Int64")
    frame.to_csv(path, index=False)
    return path


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest {path} does not exist", details={"path": str(path)})
    frame = pd.read_csv(path, dtype={"case_id": str, "patient_id": str, "path": str, "label_path": str})
    missing = [c for c in MANIFEST_COLUMNS[:6] if c not in frame.columns]
    if missing:
        raise ManifestError(f"manifest {path} lacks columns {missing}", details={"missing": missing})
    entries = []
    for row in frame.to_dict(orient="records"):
        clean = {k: (None if pd.isna(v) else v) for k, v in row.items() if k in MANIFEST_COLUMNS}
        if clean.get("foreground_voxels") is not None:
            clean["foreground_voxels"] = int(clean["foreground_voxels"])
        entries.append(ManifestEntry(**clean))
    return DatasetManifest(entries=entries)


def resolve_path(manifest_path: Union[str, Path], relative: Optional[str]) -> Optional[Path]:
    """Manifest paths are relative to the manifest's directory"""
    if relative is None:
        return None
    p = Path(relative)
    return p if p.is_absolute() else Path(manifest_path).resolve().parent / p
