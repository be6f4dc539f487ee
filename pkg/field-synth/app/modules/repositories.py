import gzip
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import nibabel as nib
import numpy as np
import pandas as pd
import torch

from app.modules.constants import CLASS_NAMES, NIFTI, TOOL_VERSION
from app.modules.exceptions import NiftiFormatError, UnsupportedVolumeError, VolumeIOError
from app.modules.models import EmbeddingConfig, InrParams, NetworkConfig, RunManifest, Segmentation, Volume
from logger import logger

CHECKPOINT_FORMAT_VERSION = 1


def _read_bytes(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"volume not found: {path}")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as error:
            raise VolumeIOError(f"could not decompress {path}: {error}") from error
    return raw


def load_nifti(path) -> Tuple[Volume, Dict]:
    """
    Read a single-file NIfTI-1 scalar volume.

    Args:
        path: .nii file (or .nii.gz, decompressed in memory first)

    Returns:
        The volume with slope/intercept applied and a dict of header metadata
    """
    path = Path(path)
    raw = _read_bytes(path)

    if len(raw) < NIFTI["header_size"]:
        raise NiftiFormatError(f"{path} is too short to hold a NIfTI-1 header")
    magic = raw[344:348]
    if magic == NIFTI["pair_magic"] + b"\x00":
        raise UnsupportedVolumeError(f"{path} is a detached header/image pair; only single-file NIfTI-1 is supported")
    if magic != NIFTI["single_file_magic"] + b"\x00":
        raise NiftiFormatError(f"{path} has magic {magic!r}, expected {NIFTI['single_file_magic']!r}")

    try:
        header = nib.Nifti1Header.from_fileobj(io.BytesIO(raw), check=False)
    except Exception as error:
        raise NiftiFormatError(f"could not parse NIfTI-1 header of {path}: {error}") from error

    ndim = int(header["dim"][0])
    if ndim != 3:
        raise UnsupportedVolumeError(f"{path} has {ndim} dimensions; only 3D volumes are supported")
    dtype = header.get_data_dtype()
    if dtype.fields is not None or dtype.name not in NIFTI["supported_dtypes"]:
        raise UnsupportedVolumeError(f"{path} has unsupported datatype {dtype}")

    shape = tuple(int(n) for n in header.get_data_shape())
    count = int(np.prod(shape))
    offset = int(header["vox_offset"])
    if len(raw) < offset + count * dtype.itemsize:
        raise VolumeIOError(
            f"{path} is truncated: expected {count * dtype.itemsize} data bytes after offset {offset}, "
            f"found {max(len(raw) - offset, 0)}"
        )

    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    slope, inter = header.get_slope_inter()
    if slope is not None:
        values = values.astype(np.float64) * slope + (inter or 0.0)

    volume = Volume(
        data=values,
        spacing=tuple(float(z) for z in header.get_zooms()[:3]),
        affine=header.get_best_affine(),
    )
    metadata = {
        "datatype": dtype.name,
        "scl_slope": None if slope is None else float(slope),
        "scl_inter": None if inter is None else float(inter),
        "sform_code": int(header["sform_code"]),
        "qform_code": int(header["qform_code"]),
        "descrip": header["descrip"].item().decode("latin-1").rstrip("\x00"),
    }
    logger.info("Loaded %s with dims %s and spacing %s", path, volume.dims, volume.spacing)
    return volume, metadata


def save_nifti(volume: Volume, path) -> None:
    """Write a float32 single-file NIfTI-1 volume (352-byte header + data)."""
    path = Path(path)
    header = nib.Nifti1Header()
    header.set_data_dtype(np.float32)
    header.set_data_shape(volume.dims)
    header.set_xyzt_units("mm")
    header.set_slope_inter(1.0, 0.0)
    header["descrip"] = f"field-synth {TOOL_VERSION}".encode("latin-1")

    image = nib.Nifti1Image(np.asarray(volume.data, dtype=np.float32), volume.affine, header=header)
    image.header.set_zooms(volume.spacing)
    image.set_sform(volume.affine, code="aligned")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        image.to_filename(str(path))
    except OSError as error:
        logger.error("Error writing volume to %s: %s", path, error)
        raise VolumeIOError(f"could not write {path}: {error}") from error
    logger.info("Saved volume with dims %s to %s", volume.dims, path)


def load_segmentation(path) -> Tuple[Segmentation, Volume]:
    """Hard label map stored as a scalar volume; returns it with its geometry carrier."""
    volume, _ = load_nifti(path)
    return Segmentation(labels=np.rint(volume.data).astype(np.int64)), volume


def save_segmentation(seg: Segmentation, geometry: Volume, path) -> None:
    save_nifti(geometry.with_data(seg.label_map().astype(np.float32)), path)


def save_soft_segmentation(seg: Segmentation, geometry: Volume, prefix) -> Dict[str, str]:
    """One probability volume per class plus the arg-max label map; returns the written paths."""
    prefix = Path(prefix)
    written = {}
    probs = seg.one_hot()
    for index, name in enumerate(CLASS_NAMES):
        target = prefix.parent / f"{prefix.name}_prob_{name}.nii"
        save_nifti(geometry.with_data(probs[..., index]), target)
        written[f"prob_{name}"] = str(target)
    labels_path = prefix.parent / f"{prefix.name}_labels.nii"
    save_segmentation(seg, geometry, labels_path)
    written["labels"] = str(labels_path)
    return written


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    volume, _ = load_nifti(path)
    return volume.data != 0


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(handle, "wb") as temp_file:
            temp_file.write(payload)
        os.replace(temp_name, path)
    except OSError as error:
        if os.path.exists(temp_name):
            os.remove(temp_name)
        raise VolumeIOError(f"could not write {path}: {error}") from error


def write_json(path, payload) -> None:
    _atomic_write(Path(path), (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def write_csv(path, rows: Iterable[Dict], columns: List[str]) -> None:
    dataframe = pd.DataFrame(list(rows))
    for column in columns:
        if column not in dataframe.columns:
            dataframe[column] = None
    dataframe = dataframe[columns]
    _atomic_write(Path(path), dataframe.to_csv(index=False, lineterminator="\n").encode("utf-8"))


def save_checkpoint(params: InrParams, path) -> None:
    """Versioned checkpoint (float32 tensors + configs) with a JSON manifest alongside."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network": params.network.model_dump(),
        "embedding": params.embedding.model_dump(),
        "frequencies": params.frequencies.detach().to(torch.float32).clone(),
        "tensors": {name: tensor.detach().to(torch.float32).clone() for name, tensor in params.tensors.items()},
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    _atomic_write(path, buffer.getvalue())
    write_json(
        path.with_suffix(".json"),
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "network": params.network.model_dump(),
            "embedding": params.embedding.model_dump(),
            "layer_shapes": {name: list(tensor.shape) for name, tensor in params.tensors.items()},
            "dtype": "float32",
        },
    )
    logger.info("Saved INR checkpoint to %s", path)


def load_checkpoint(path) -> InrParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise UnsupportedVolumeError(f"checkpoint format {version} is not supported")
    return InrParams(
        tensors=payload["tensors"],
        frequencies=payload["frequencies"],
        network=NetworkConfig(**payload["network"]),
        embedding=EmbeddingConfig(**payload["embedding"]),
    )


class RunRepository:
    """Output directory of one CLI run; every written file gets a sibling manifest."""

    def __init__(self, output_dir):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: Dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _record(self, key: str, path: Path) -> str:
        self.outputs[key] = str(path)
        return str(path)

    def write_volume(self, key: str, volume: Volume, name: Optional[str] = None) -> str:
        target = self.path(name or f"{key}.nii")
        save_nifti(volume, target)
        return self._record(key, target)

    def write_segmentation(self, key: str, seg: Segmentation, geometry: Volume, name: Optional[str] = None) -> str:
        target = self.path(name or f"{key}.nii")
        save_segmentation(seg, geometry, target)
        return self._record(key, target)

    def write_soft_segmentation(self, key: str, seg: Segmentation, geometry: Volume) -> Dict[str, str]:
        written = save_soft_segmentation(seg, geometry, self.path(key))
        for name, target in written.items():
            self.outputs[f"{key}_{name}"] = target
        return written

    def write_json(self, key: str, payload, name: Optional[str] = None) -> str:
        target = self.path(name or f"{key}.json")
        write_json(target, payload)
        return self._record(key, target)

    def write_csv(self, key: str, rows, columns: List[str], name: Optional[str] = None) -> str:
        target = self.path(name or f"{key}.csv")
        write_csv(target, rows, columns)
        return self._record(key, target)

    def write_checkpoint(self, key: str, params: InrParams, name: Optional[str] = None) -> str:
        target = self.path(name or f"{key}.pt")
        save_checkpoint(params, target)
        return self._record(key, target)

    def finalize(self, manifest: RunManifest) -> RunManifest:
        manifest = manifest.model_copy(update={"outputs": dict(self.outputs)})
        payload = manifest.model_dump()
        write_json(self.path("manifest.json"), payload)
        for target in self.outputs.values():
            write_json(f"{target}.manifest.json", payload)
        logger.info("Wrote manifest for %d outputs in %s", len(self.outputs), self.output_dir)
        return manifest
