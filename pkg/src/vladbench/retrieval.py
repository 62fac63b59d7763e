"""Exact nearest-neighbor retrieval over image descriptors.

The index is a plain in-memory matrix scanned in full for every query: no
quantization, no pruning, so results are exactly the L2 ranking.  Ranking
order is ascending distance with ties broken by ascending image id, which
makes every ranked list deterministic.

Descriptor matrices persist as ``.cds1`` files (version 1, little-endian)::

    magic   "CDS1"              4 bytes
    version u16 = 1
    count   u32
    dim     u32
    image ids: count strings, each u32 byte length + UTF-8
    vectors count*dim float32, row-major

The index itself is rebuilt from the matrix at load time; there is no
separate index file.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import ByteReader, pack_f32_array, pack_str, pack_u16, pack_u32
from .codebook import pairwise_sqdist
from .errors import FormatError, NonFinitePayloadError
from .vlad import VladDescriptor

CDS1_MAGIC = b"CDS1"
CDS1_VERSION = 1


@dataclass(frozen=True, eq=False)
class RankedList:
    """Result of one query: ids and distances sorted best-first."""

    query_id: str
    image_ids: tuple[str, ...]
    distances: np.ndarray

    def __post_init__(self) -> None:
        dists = np.asarray(self.distances, dtype=np.float64).copy()
        if dists.shape != (len(self.image_ids),):
            raise ValueError("one distance per returned image id required")
        dists.flags.writeable = False
        object.__setattr__(self, "distances", dists)


@dataclass(frozen=True, eq=False)
class RetrievalIndex:
    """Immutable (image_ids, vectors) database for exact scans."""

    image_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self) -> None:
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.image_ids):
            raise ValueError(
                f"vectors must be ({len(self.image_ids)}, dim), got {vecs.shape}"
            )
        if vecs.shape[0] < 1:
            raise ValueError("index must contain at least one image")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("index vectors must be finite")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("duplicate image ids in index")
        vecs = np.ascontiguousarray(vecs).copy()
        vecs.flags.writeable = False
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(
            self, "_row_of", {iid: row for row, iid in enumerate(self.image_ids)}
        )

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def count(self) -> int:
        return int(self.vectors.shape[0])

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row_of

    def vector_for(self, image_id: str) -> np.ndarray:
        row = self._row_of.get(image_id)
        if row is None:
            raise KeyError(f"image id {image_id!r} not in index")
        return self.vectors[row]


def build_index(image_ids: list[str], vectors: np.ndarray) -> RetrievalIndex:
    """Assemble an index from parallel id and vector sequences."""
    return RetrievalIndex(image_ids=tuple(image_ids), vectors=vectors)


def index_from_vlads(vlads: list[VladDescriptor]) -> RetrievalIndex:
    """Build an index from per-image descriptors of one pipeline configuration."""
    if not vlads:
        raise ValueError("no descriptors to index")
    head = vlads[0]
    for v in vlads:
        if (
            v.layer_name != head.layer_name
            or v.scale_ids != head.scale_ids
            or v.k != head.k
            or v.dim_per_word != head.dim_per_word
            or v.normalization != head.normalization
        ):
            raise ValueError(
                f"descriptor for {v.image_id!r} does not match the index "
                f"configuration of {head.image_id!r}"
            )
    return build_index(
        [v.image_id for v in vlads], np.stack([v.values for v in vlads])
    )


def query(
    index: RetrievalIndex,
    vector: np.ndarray,
    *,
    query_id: str = "",
    top_k: int | None = None,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> RankedList:
    """Rank the whole database against one query vector.

    Distances are Euclidean, computed in float64.  Ties are broken by
    ascending image id.  ``exclude`` drops ids from the result (unknown ids
    are ignored); ``top_k`` truncates after sorting.
    """
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (index.dim,):
        raise ValueError(f"query must have shape ({index.dim},), got {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("query vector must be finite")
    if top_k is not None and top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    distances = np.sqrt(pairwise_sqdist(index.vectors, vec[None, :])[:, 0])
    ids = np.asarray(index.image_ids)
    if exclude:
        keep = ~np.isin(ids, sorted(exclude))
        ids = ids[keep]
        distances = distances[keep]
    # lexsort: last key is primary, so sort by distance then id
    order = np.lexsort((ids, distances))
    if top_k is not None:
        order = order[:top_k]
    return RankedList(
        query_id=query_id,
        image_ids=tuple(str(i) for i in ids[order]),
        distances=distances[order],
    )


def query_by_id(
    index: RetrievalIndex,
    image_id: str,
    *,
    top_k: int | None = None,
    exclude_self: bool = True,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> RankedList:
    """Query with a database image's own descriptor."""
    drop = set(exclude)
    if exclude_self:
        drop.add(image_id)
    return query(
        index,
        index.vector_for(image_id),
        query_id=image_id,
        top_k=top_k,
        exclude=drop,
    )


def save_descriptor_matrix(index: RetrievalIndex, path: str | Path) -> None:
    blob = (
        CDS1_MAGIC
        + pack_u16(CDS1_VERSION)
        + pack_u32(index.count)
        + pack_u32(index.dim)
        + b"".join(pack_str(i) for i in index.image_ids)
        + pack_f32_array(index.vectors)
    )
    Path(path).write_bytes(blob)


def load_descriptor_matrix(path: str | Path) -> RetrievalIndex:
    path = Path(path)
    reader = ByteReader(path.read_bytes(), str(path))
    reader.expect_magic(CDS1_MAGIC, "descriptor matrix")
    reader.expect_version(CDS1_VERSION)
    count = reader.u32()
    dim = reader.u32()
    if count < 1 or dim < 1:
        raise FormatError(f"{path}: bad dimensions count={count} dim={dim}")
    image_ids = tuple(reader.str_u32() for _ in range(count))
    vectors = reader.f32_array(count * dim)
    reader.expect_end()
    if not np.all(np.isfinite(vectors)):
        raise NonFinitePayloadError(f"{path}: non-finite descriptor payload")
    try:
        return RetrievalIndex(
            image_ids=image_ids, vectors=vectors.reshape(count, dim)
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
