"""VLAD aggregation of local descriptors and its normalization pipeline.

Encoding: with a k-word codebook, each L2-normalized local descriptor f is
assigned to its nearest centroid c, and block i of the output accumulates
the residuals f - c_i over descriptors assigned to word i.  The image
descriptor is the concatenation of the k blocks (k * dim values).

Normalization is a small state machine so stages cannot be applied twice or
out of order::

    raw --intra_normalize--> intra --global_l2--> intra+l2
    raw --ssr_normalize----> ssr   --global_l2--> ssr+l2

``concat_multiscale`` joins per-scale encodings (ascending scale id) before
the final global L2.

On-disk format (``.vlad``, version 1, little-endian)::

    magic   "VLD1"              4 bytes
    version u16 = 1
    k       u32
    dim_per_word u32
    normalization u16           index into NORMALIZATION_STATES
    n_scales u16
    scale_ids n_scales * u32    ascending
    image_id   u32 byte length + UTF-8
    layer_name u32 byte length + UTF-8
    values  k*dim_per_word*n_scales float32, scale-major

Values are float64 in memory and float32 on disk, so a written descriptor
reads back exactly when its values are float32-representable.
"""

from __future__ import annotations

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
from .codebook import Codebook, assign_many
from .errors import FormatError, NonFinitePayloadError
from .features import DescriptorSet

VLD1_MAGIC = b"VLD1"
VLD1_VERSION = 1

NORMALIZATION_STATES = ("raw", "intra", "ssr", "intra+l2", "ssr+l2")


@dataclass(frozen=True, eq=False)
class VladDescriptor:
    """One image's aggregated descriptor at one or more scales.

    ``values`` is float64 with ``k * dim_per_word * len(scale_ids)``
    entries: scales in ascending order, k word blocks within each scale.
    """

    image_id: str
    layer_name: str
    scale_ids: tuple[int, ...]
    k: int
    dim_per_word: int
    normalization: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.normalization not in NORMALIZATION_STATES:
            raise ValueError(f"unknown normalization state {self.normalization!r}")
        if not self.scale_ids:
            raise ValueError("scale_ids must be non-empty")
        if list(self.scale_ids) != sorted(set(self.scale_ids)):
            raise ValueError(f"scale_ids must be strictly ascending, got {self.scale_ids}")
        if self.k < 1 or self.dim_per_word < 1:
            raise ValueError("k and dim_per_word must be >= 1")
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        expected = self.k * self.dim_per_word * len(self.scale_ids)
        if vals.size != expected:
            raise ValueError(f"values has {vals.size} entries, expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("values must be finite")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "scale_ids", tuple(int(s) for s in self.scale_ids))

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VladDescriptor):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.layer_name == other.layer_name
            and self.scale_ids == other.scale_ids
            and self.k == other.k
            and self.dim_per_word == other.dim_per_word
            and self.normalization == other.normalization
            and np.array_equal(self.values, other.values)
        )

    def _replace_values(self, values: np.ndarray, normalization: str) -> VladDescriptor:
        return VladDescriptor(
            image_id=self.image_id,
            layer_name=self.layer_name,
            scale_ids=self.scale_ids,
            k=self.k,
            dim_per_word=self.dim_per_word,
            normalization=normalization,
            values=values,
        )


def encode_vlad(descriptors: DescriptorSet, codebook: Codebook) -> VladDescriptor:
    """Aggregate one image's descriptors into a raw VLAD.

    Requires a normalized descriptor set whose dimension matches the
    codebook.  Rows are first sorted back into canonical grid order, so the
    residual summation order (and therefore the exact float result) does not
    depend on how the caller permuted the set.
    """
    if not descriptors.normalized:
        raise ValueError("encode_vlad requires L2-normalized descriptors")
    if descriptors.dim != codebook.dim:
        raise ValueError(
            f"descriptor dim {descriptors.dim} != codebook dim {codebook.dim}"
        )
    if descriptors.count < 1:
        raise ValueError("descriptor set is empty")
    if codebook.layer_name and descriptors.layer_name != codebook.layer_name:
        raise ValueError(
            f"layer mismatch: descriptors from {descriptors.layer_name!r}, "
            f"codebook trained on {codebook.layer_name!r}"
        )
    order = np.argsort(descriptors.grid_index, kind="stable")
    vecs = descriptors.vectors[order].astype(np.float64)
    labels = assign_many(codebook, vecs)
    blocks = np.zeros((codebook.k, codebook.dim), dtype=np.float64)
    np.add.at(blocks, labels, vecs - codebook.centroids[labels])
    return VladDescriptor(
        image_id=descriptors.image_id,
        layer_name=descriptors.layer_name,
        scale_ids=(descriptors.scale_id,),
        k=codebook.k,
        dim_per_word=codebook.dim,
        normalization="raw",
        values=blocks.reshape(-1),
    )


def _require_state(vlad: VladDescriptor, allowed: tuple[str, ...], op: str) -> None:
    if vlad.normalization not in allowed:
        raise ValueError(
            f"{op} requires normalization state in {allowed}, "
            f"got {vlad.normalization!r}"
        )


def intra_normalize(vlad: VladDescriptor) -> VladDescriptor:
    """L2-normalize each word block independently; zero blocks stay zero."""
    _require_state(vlad, ("raw",), "intra_normalize")
    blocks = vlad.values.reshape(-1, vlad.dim_per_word)
    norms = np.linalg.norm(blocks, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return vlad._replace_values((blocks / safe).reshape(-1), "intra")


def ssr_normalize(vlad: VladDescriptor) -> VladDescriptor:
    """Signed square root: x -> sign(x) * sqrt(|x|), elementwise."""
    _require_state(vlad, ("raw",), "ssr_normalize")
    values = np.sign(vlad.values) * np.sqrt(np.abs(vlad.values))
    return vlad._replace_values(values, "ssr")


def global_l2(vlad: VladDescriptor) -> VladDescriptor:
    """Final whole-vector L2 normalization; an all-zero vector stays zero."""
    _require_state(vlad, ("intra", "ssr"), "global_l2")
    norm = float(np.linalg.norm(vlad.values))
    values = vlad.values if norm == 0.0 else vlad.values / norm
    return vlad._replace_values(values, vlad.normalization + "+l2")


def concat_multiscale(vlads: list[VladDescriptor]) -> VladDescriptor:
    """Concatenate per-scale encodings of one image, ascending by scale id.

    Inputs must share image, layer, codebook shape, and normalization state,
    with pairwise-distinct single scales; the state must be one of raw,
    intra, or ssr (the final global L2 belongs after concatenation).
    """
    if not vlads:
        raise ValueError("nothing to concatenate")
    if len(vlads) == 1:
        return vlads[0]
    head = vlads[0]
    for v in vlads:
        if len(v.scale_ids) != 1:
            raise ValueError("concat_multiscale takes single-scale inputs")
        if (
            v.image_id != head.image_id
            or v.layer_name != head.layer_name
            or v.k != head.k
            or v.dim_per_word != head.dim_per_word
        ):
            raise ValueError("mismatched inputs to concat_multiscale")
        if v.normalization != head.normalization:
            raise ValueError("all inputs must share a normalization state")
    _require_state(head, ("raw", "intra", "ssr"), "concat_multiscale")
    scales = [v.scale_ids[0] for v in vlads]
    if len(set(scales)) != len(scales):
        raise ValueError(f"duplicate scale ids: {sorted(scales)}")
    order = np.argsort(scales)
    values = np.concatenate([vlads[int(i)].values for i in order])
    return VladDescriptor(
        image_id=head.image_id,
        layer_name=head.layer_name,
        scale_ids=tuple(sorted(scales)),
        k=head.k,
        dim_per_word=head.dim_per_word,
        normalization=head.normalization,
        values=values,
    )


def save_vlad(vlad: VladDescriptor, path: str | Path) -> None:
    blob = (
        VLD1_MAGIC
        + pack_u16(VLD1_VERSION)
        + pack_u32(vlad.k)
        + pack_u32(vlad.dim_per_word)
        + pack_u16(NORMALIZATION_STATES.index(vlad.normalization))
        + pack_u16(len(vlad.scale_ids))
        + b"".join(pack_u32(s) for s in vlad.scale_ids)
        + pack_str(vlad.image_id)
        + pack_str(vlad.layer_name)
        + pack_f32_array(vlad.values)
    )
    Path(path).write_bytes(blob)


def load_vlad(path: str | Path) -> VladDescriptor:
    path = Path(path)
    reader = ByteReader(path.read_bytes(), str(path))
    reader.expect_magic(VLD1_MAGIC, "VLAD descriptor")
    reader.expect_version(VLD1_VERSION)
    k = reader.u32()
    dim_per_word = reader.u32()
    norm_code = reader.u16()
    n_scales = reader.u16()
    if norm_code >= len(NORMALIZATION_STATES):
        raise FormatError(f"{path}: unknown normalization code {norm_code}")
    if n_scales < 1:
        raise FormatError(f"{path}: n_scales must be >= 1")
    scale_ids = tuple(reader.u32() for _ in range(n_scales))
    image_id = reader.str_u32()
    layer_name = reader.str_u32()
    values = reader.f32_array(k * dim_per_word * n_scales)
    reader.expect_end()
    if not np.all(np.isfinite(values)):
        raise NonFinitePayloadError(f"{path}: non-finite VLAD payload")
    try:
        return VladDescriptor(
            image_id=image_id,
            layer_name=layer_name,
            scale_ids=scale_ids,
            k=k,
            dim_per_word=dim_per_word,
            normalization=NORMALIZATION_STATES[norm_code],
            values=values.astype(np.float64),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
