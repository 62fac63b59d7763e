"""Writers for the interchange formats the retrieval engine consumes.

Implemented from the format documentation alone (4-byte magic, little-endian
u16 version, u32 scalars, u32-length-prefixed UTF-8 strings, float32
payload) so this package shares no serialization code with the consumer.
The test suite cross-checks every writer byte for byte against the
consumer's own implementation.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CFMP_MAGIC = b"CFMP"
CFMP_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def cfmp_bytes(
    image_id: str,
    layer_name: str,
    scale_id: int,
    side: int,
    depth: int,
    values: np.ndarray,
) -> bytes:
    """One feature map in .cfmp layout; values row-major (row, col, channel)."""
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    if flat.size != side * side * depth:
        raise ValueError(
            f"payload has {flat.size} values, expected {side}x{side}x{depth}"
        )
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise ValueError(
            f"non-finite activation at flat index {int(bad[0])} "
            f"({image_id}/{layer_name} scale {scale_id})"
        )
    return (
        CFMP_MAGIC
        + struct.pack("<H", CFMP_VERSION)
        + struct.pack("<III", side, depth, scale_id)
        + _pack_str(image_id)
        + _pack_str(layer_name)
        + flat.tobytes()
    )


def write_cfmp(
    path: str | Path,
    image_id: str,
    layer_name: str,
    scale_id: int,
    side: int,
    depth: int,
    values: np.ndarray,
) -> None:
    Path(path).write_bytes(
        cfmp_bytes(image_id, layer_name, scale_id, side, depth, values)
    )


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write an (h, w, 3) uint8 array as a binary P6 image."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"image must be (h, w, 3) uint8, got {img.shape} {img.dtype}")
    height, width = img.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def manifest_doc(
    dataset_name: str,
    records: list[dict],
    preprocessing: dict | None = None,
) -> dict:
    """Manifest document; records carry image_id/feature_maps/image_paths."""
    doc = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "dataset_name": dataset_name,
        "images": records,
    }
    if preprocessing is not None:
        # extra top-level keys are ignored by the consumer's loader
        doc["preprocessing"] = preprocessing
    return doc


def write_manifest(doc: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
