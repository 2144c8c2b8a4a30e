"""
Artifact Storage
Checkpoints (manifest.json + params.bin), DMAP density-map files, raster
images and annotation JSON.
"""

import json
import logging
import os
import struct
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from matplotlib import colormaps
from PIL import Image

from geometry import PointAnnotation
from padnet_model import ModelSpec, PaDNetModel, build_model

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"
DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1
DMAP_HEADER = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    """Corrupt checkpoint or one whose ModelSpec disagrees with the requested one."""


class AnnotationError(ValueError):
    """Unreadable or invalid annotation file."""


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: PaDNetModel, directory: str, extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Write every parameter and batch-norm buffer as little-endian float32.

    Entries are laid out back to back in the blob in state_dict order.
    """
    os.makedirs(directory, exist_ok=True)
    buffer_names = {name for name, _ in model.named_buffers()}
    entries, chunks, offset = [], [], 0
    for name, value in model.state_dict().items():
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "kind": "buffer" if name in buffer_names else "parameter",
            "shape": list(value.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_dict(),
        "pretrained_levels": sorted(int(level) for level in model.pretrained_levels),
        "entries": entries,
        "extra": extra or {},
    }
    blob_path = os.path.join(directory, BLOB_NAME)
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    with open(blob_path + ".tmp", "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path + ".tmp", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    os.replace(blob_path + ".tmp", blob_path)
    os.replace(manifest_path + ".tmp", manifest_path)
    logger.info(f"💾 Saved checkpoint to {directory} ({len(entries)} entries, {offset} bytes)")
    return directory


def read_checkpoint_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from e
    for key in ("format_version", "model_spec", "entries"):
        if key not in manifest:
            raise CheckpointError(f"{path} is missing field {key!r}")
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has format_version {manifest['format_version']}, expected {CHECKPOINT_VERSION}")
    return manifest


def _check_tiling(entries: List[Dict[str, Any]], blob_size: int, directory: str) -> None:
    expected = 0
    for entry in sorted(entries, key=lambda e: e["offset"]):
        size = int(np.prod(entry["shape"], dtype=np.int64)) * 4
        if entry["nbytes"] != size:
            raise CheckpointError(
                f"{directory}: entry {entry['name']!r} declares {entry['nbytes']} bytes for shape {entry['shape']}"
            )
        if entry["offset"] != expected:
            raise CheckpointError(
                f"{directory}: entry {entry['name']!r} starts at byte {entry['offset']}, expected {expected}"
            )
        expected += size
    if expected != blob_size:
        raise CheckpointError(f"{directory}: entries cover {expected} bytes but {BLOB_NAME} holds {blob_size}")


def load_checkpoint(directory: str, expected_spec: Optional[ModelSpec] = None) -> Tuple[PaDNetModel, Dict[str, Any]]:
    """
    Rebuild a model from a checkpoint directory.

    Args:
        directory: folder holding manifest.json and params.bin
        expected_spec: when given, the stored spec must match it exactly

    Returns:
        (model in eval mode, the manifest's extra dict)
    """
    manifest = read_checkpoint_manifest(directory)
    with open(os.path.join(directory, BLOB_NAME), "rb") as f:
        blob = f.read()
    _check_tiling(manifest["entries"], len(blob), directory)

    try:
        spec = ModelSpec.from_dict(manifest["model_spec"])
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{directory}: invalid model_spec: {e}") from e
    if expected_spec is not None and expected_spec.to_dict() != spec.to_dict():
        raise CheckpointError(
            f"{directory}: checkpoint ModelSpec does not match the requested one\n"
            f"  checkpoint: {json.dumps(spec.to_dict(), sort_keys=True)}\n"
            f"  requested:  {json.dumps(expected_spec.to_dict(), sort_keys=True)}"
        )

    state = {
        entry["name"]: np.frombuffer(blob, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"])
        .reshape(entry["shape"]).astype(np.float32)
        for entry in manifest["entries"]
    }
    model = build_model(spec, check_flow=False)
    try:
        model.load_state_dict(state, strict=True)
    except ValueError as e:
        raise CheckpointError(f"{directory}: {e}") from e
    model.pretrained_levels = list(manifest.get("pretrained_levels", []))
    model.eval()
    return model, manifest.get("extra", {})


# ---------------------------------------------------------------------------
# Density maps
# ---------------------------------------------------------------------------

def write_dmap(path: str, values: np.ndarray) -> None:
    """DMAP: magic, u32 version, u32 height, u32 width, then row-major little-endian float32 cells."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"a density map must be 2-D, got shape {values.shape}")
    height, width = values.shape
    with open(path, "wb") as f:
        f.write(DMAP_HEADER.pack(DMAP_MAGIC, DMAP_VERSION, height, width))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_dmap(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < DMAP_HEADER.size:
        raise ValueError(f"{path}: file too short for a DMAP header")
    magic, version, height, width = DMAP_HEADER.unpack_from(data)
    if magic != DMAP_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {DMAP_MAGIC!r}")
    if version != DMAP_VERSION:
        raise ValueError(f"{path}: unsupported DMAP version {version}")
    expected = DMAP_HEADER.size + 4 * height * width
    if len(data) != expected:
        raise ValueError(f"{path}: {len(data)} bytes, expected {expected} for a {height}x{width} map")
    cells = np.frombuffer(data, dtype="<f4", offset=DMAP_HEADER.size)
    return cells.reshape(height, width).astype(np.float32)


def heatmap_image(values: np.ndarray, cmap: str = "jet") -> Image.Image:
    """8-bit colour rendering of a density map, scaled to its own maximum."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    rgba = colormaps[cmap](scaled, bytes=True)
    return Image.fromarray(np.ascontiguousarray(rgba[..., :3]))


def save_heatmap(path: str, values: np.ndarray, upscale: int = 1) -> None:
    image = heatmap_image(values)
    if upscale > 1:
        image = image.resize((image.width * upscale, image.height * upscale), Image.Resampling.NEAREST)
    image.save(path)


# ---------------------------------------------------------------------------
# Rasters
# ---------------------------------------------------------------------------

def save_raster(path: str, pixels: np.ndarray) -> None:
    """Write a uint8 grayscale or RGB raster; the extension picks PNG or PGM."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ValueError(f"rasters must be uint8, got {pixels.dtype}")
    Image.fromarray(pixels).save(path)


def load_raster(path: str, channels: int = 1) -> np.ndarray:
    """Read an image as uint8, H x W for one channel or H x W x 3 for three."""
    with Image.open(path) as image:
        converted = image.convert("L" if channels == 1 else "RGB")
        return np.asarray(converted, dtype=np.uint8).copy()


def resize_raster(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size."""
    image = Image.fromarray(np.asarray(pixels, dtype=np.uint8))
    return np.asarray(image.resize((size, size), Image.Resampling.BILINEAR), dtype=np.uint8)


def to_network_input(pixels: np.ndarray) -> np.ndarray:
    """uint8 H x W (x C) raster -> float32 C x H x W in [0, 1]."""
    array = np.asarray(pixels, dtype=np.float32) / 255.0
    if array.ndim == 2:
        return array[None]
    return np.ascontiguousarray(array.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def save_annotation(path: str, ann: PointAnnotation) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(ann.to_dict(), f, indent=1)


def load_annotation(path: str) -> PointAnnotation:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, UnicodeDecodeError) as e:
        raise AnnotationError(f"cannot read annotation {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise AnnotationError(f"annotation {path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}") from e
    try:
        return PointAnnotation.from_dict(data)
    except (KeyError, TypeError, ValueError) as e:
        raise AnnotationError(f"annotation {path} is invalid: {e}") from e
