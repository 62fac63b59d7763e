"""Convolutional feature maps, their on-disk format, and descriptor extraction.

A feature map is the activation tensor of one convolutional layer for one
image: ``side x side`` spatial positions, ``depth`` channels per position.
Each spatial position is treated as one local descriptor, so a map yields
``side * side`` descriptors of dimension ``depth``.

On-disk format (``.cfmp``, version 1, everything little-endian)::

    magic   "CFMP"                      4 bytes
    version u16 = 1
    side    u32
    depth   u32
    scale_id u32                        1 or 2
    image_id   u32 byte length + UTF-8
    layer_name u32 byte length + UTF-8
    values  side*side*depth float32, row-major:
            value of channel c at grid row i, column j sits at
            flat index (i*side + j)*depth + c

Feature exporters in any language produce this layout; everything downstream
(codebook training, encoding, visualization) consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import (
    ByteReader,
    pack_f32_array,
    pack_str,
    pack_u16,
    pack_u32,
)
from .errors import FormatError, NonFinitePayloadError

CFMP_MAGIC = b"CFMP"
CFMP_VERSION = 1

_VALID_SCALES = (1, 2)


def _freeze(array: np.ndarray) -> np.ndarray:
    """Own a contiguous copy and make it read-only."""
    out = np.ascontiguousarray(array).copy()
    out.flags.writeable = False
    return out


def _first_nonfinite_index(values: np.ndarray) -> int | None:
    finite = np.isfinite(values.ravel())
    if finite.all():
        return None
    return int(np.flatnonzero(~finite)[0])


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One layer's activations for one image at one input scale.

    ``values`` has shape ``(side, side, depth)`` in float32; instances are
    immutable after construction (the array is read-only).
    """

    image_id: str
    layer_name: str
    scale_id: int
    side: int
    depth: int
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.scale_id not in _VALID_SCALES:
            raise ValueError(f"scale_id must be 1 or 2, got {self.scale_id}")
        if self.side < 1 or self.depth < 1:
            raise ValueError(f"side and depth must be >= 1, got {self.side}x{self.depth}")
        vals = np.asarray(self.values, dtype=np.float32)
        expected = (self.side, self.side, self.depth)
        if vals.shape != expected:
            if vals.size != self.side * self.side * self.depth:
                raise ValueError(
                    f"values has {vals.size} elements, expected "
                    f"{self.side * self.side * self.depth}"
                )
            vals = vals.reshape(expected)
        bad = _first_nonfinite_index(vals)
        if bad is not None:
            raise ValueError(f"non-finite value at flat index {bad}")
        object.__setattr__(self, "values", _freeze(vals))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.layer_name == other.layer_name
            and self.scale_id == other.scale_id
            and self.side == other.side
            and self.depth == other.depth
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Local descriptors extracted from one feature map.

    ``vectors`` is ``(count, dim)`` float32.  ``grid_index[r]`` is the
    row-major grid position ``i*side + j`` that row ``r`` came from, so a
    set stays re-sortable into canonical grid order no matter how callers
    permute it.  ``normalized`` records whether rows have unit L2 norm.
    """

    image_id: str
    layer_name: str
    scale_id: int
    dim: int
    vectors: np.ndarray
    normalized: bool
    grid_index: np.ndarray

    def __post_init__(self) -> None:
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise ValueError(f"vectors must be (count, {self.dim}), got {vecs.shape}")
        grid = np.asarray(self.grid_index, dtype=np.int32)
        if grid.shape != (vecs.shape[0],):
            raise ValueError("grid_index must have one entry per descriptor")
        if not np.array_equal(np.sort(grid), np.arange(vecs.shape[0], dtype=np.int32)):
            raise ValueError("grid_index must be a permutation of 0..count-1")
        bad = _first_nonfinite_index(vecs)
        if bad is not None:
            raise ValueError(f"non-finite descriptor value at flat index {bad}")
        object.__setattr__(self, "vectors", _freeze(vecs))
        object.__setattr__(self, "grid_index", _freeze(grid))

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def grid_side(self) -> int:
        """Grid side length; defined only for full side*side sets."""
        side = math.isqrt(self.count)
        if side * side != self.count:
            raise ValueError(f"descriptor count {self.count} is not a square grid")
        return side

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.layer_name == other.layer_name
            and self.scale_id == other.scale_id
            and self.dim == other.dim
            and self.normalized == other.normalized
            and np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.grid_index, other.grid_index)
        )


def write_cfmp(feature_map: FeatureMap, path: str | Path) -> None:
    """Serialize a feature map to the .cfmp layout documented above."""
    blob = (
        CFMP_MAGIC
        + pack_u16(CFMP_VERSION)
        + pack_u32(feature_map.side)
        + pack_u32(feature_map.depth)
        + pack_u32(feature_map.scale_id)
        + pack_str(feature_map.image_id)
        + pack_str(feature_map.layer_name)
        + pack_f32_array(feature_map.values)
    )
    Path(path).write_bytes(blob)


def read_cfmp(path: str | Path) -> FeatureMap:
    """Decode a .cfmp file.

    Raises ``BadMagicError``, ``UnsupportedVersionError``,
    ``TruncatedFileError``, or ``NonFinitePayloadError`` for the four ways a
    file can be malformed, and plain ``FormatError`` for invalid field values.
    """
    path = Path(path)
    reader = ByteReader(path.read_bytes(), str(path))
    reader.expect_magic(CFMP_MAGIC, "feature map")
    reader.expect_version(CFMP_VERSION)
    side = reader.u32()
    depth = reader.u32()
    scale_id = reader.u32()
    image_id = reader.str_u32()
    layer_name = reader.str_u32()
    if side < 1 or depth < 1:
        raise FormatError(f"{path}: side and depth must be >= 1, got {side}x{depth}")
    if scale_id not in _VALID_SCALES:
        raise FormatError(f"{path}: scale_id must be 1 or 2, got {scale_id}")
    values = reader.f32_array(side * side * depth)
    reader.expect_end()
    bad = _first_nonfinite_index(values)
    if bad is not None:
        raise NonFinitePayloadError(f"{path}: non-finite value at flat index {bad}")
    return FeatureMap(
        image_id=image_id,
        layer_name=layer_name,
        scale_id=scale_id,
        side=side,
        depth=depth,
        values=values.reshape(side, side, depth),
    )


def extract_descriptors(feature_map: FeatureMap) -> DescriptorSet:
    """Flatten a map into its side*side local descriptors in grid order.

    Row ``i*side + j`` of the result is the depth-vector at grid position
    ``(i, j)``; descriptors are returned raw (not normalized).
    """
    side = feature_map.side
    vectors = feature_map.values.reshape(side * side, feature_map.depth)
    return DescriptorSet(
        image_id=feature_map.image_id,
        layer_name=feature_map.layer_name,
        scale_id=feature_map.scale_id,
        dim=feature_map.depth,
        vectors=vectors,
        normalized=False,
        grid_index=np.arange(side * side, dtype=np.int32),
    )


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm; an all-zero vector is returned as-is."""
    vec = np.asarray(vector)
    if not np.all(np.isfinite(vec)):
        raise ValueError("cannot normalize a non-finite vector")
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm == 0.0:
        return vec.copy()
    return (vec / norm).astype(vec.dtype, copy=False)


def l2_normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Row-wise l2_normalize; zero rows stay zero."""
    mat = np.asarray(matrix)
    norms = np.linalg.norm(mat.astype(np.float64), axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return (mat / safe).astype(mat.dtype, copy=False)


def normalize_descriptors(descriptors: DescriptorSet) -> DescriptorSet:
    """Return the set with unit-norm rows; already-normalized sets pass through."""
    if descriptors.normalized:
        return descriptors
    return DescriptorSet(
        image_id=descriptors.image_id,
        layer_name=descriptors.layer_name,
        scale_id=descriptors.scale_id,
        dim=descriptors.dim,
        vectors=l2_normalize_rows(descriptors.vectors),
        normalized=True,
        grid_index=descriptors.grid_index,
    )
