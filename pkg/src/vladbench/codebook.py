"""Visual-word codebooks: seeded k-means training, assignment, persistence.

Training is Lloyd's algorithm over float64 with k-means++ seeding from an
explicit integer seed.  Reruns with identical inputs produce bit-identical
centroids: seeding consumes a fixed number of draws from one generator,
every reduction runs in a fixed order, and no step depends on wall clock,
hashing, or thread count.

On-disk format (``.cbk1``, version 1, little-endian)::

    magic   "CBK1"              4 bytes
    version u16 = 1
    k       u32
    dim     u32
    scale_id u32
    seed    u64
    iterations_run u32
    final_inertia  f64
    layer_name     u32 byte length + UTF-8
    centroids      k*dim float64, row-major
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._binio import (
    ByteReader,
    pack_f64,
    pack_f64_array,
    pack_str,
    pack_u16,
    pack_u32,
    pack_u64,
)
from .errors import FormatError, NonFinitePayloadError

CBK1_MAGIC = b"CBK1"
CBK1_VERSION = 1

# Problems up to this many diff-tensor elements use the exact elementwise
# path; larger ones switch to the BLAS expansion, which is fast but rounds
# differently in the last bits.
_DIRECT_LIMIT = 1 << 27


@dataclass(frozen=True, eq=False)
class Codebook:
    """A trained visual vocabulary.

    ``centroids`` is ``(k, dim)`` float64 and read-only.  The two trailing
    tuples are the training log: per-iteration inertia, and the indices into
    that history whose value followed an empty-cluster repair (and so may
    exceed its predecessor).  The log is not persisted and does not take part
    in equality.
    """

    k: int
    dim: int
    centroids: np.ndarray
    layer_name: str
    scale_id: int
    seed: int
    iterations_run: int
    final_inertia: float
    inertia_history: tuple[float, ...] = field(default=())
    repair_iterations: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")
        cen = np.asarray(self.centroids, dtype=np.float64)
        if cen.shape != (self.k, self.dim):
            raise ValueError(
                f"centroids must be ({self.k}, {self.dim}), got {cen.shape}"
            )
        if not np.all(np.isfinite(cen)):
            raise ValueError("centroids must be finite")
        cen = np.ascontiguousarray(cen).copy()
        cen.flags.writeable = False
        object.__setattr__(self, "centroids", cen)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.k == other.k
            and self.dim == other.dim
            and self.layer_name == other.layer_name
            and self.scale_id == other.scale_id
            and self.seed == other.seed
            and self.iterations_run == other.iterations_run
            and self.final_inertia == other.final_inertia
            and np.array_equal(self.centroids, other.centroids)
        )


def pairwise_sqdist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared L2 distances, (n, k) float64."""
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    if pts.ndim != 2 or cen.ndim != 2 or pts.shape[1] != cen.shape[1]:
        raise ValueError(f"shape mismatch: {pts.shape} vs {cen.shape}")
    n, dim = pts.shape
    k = cen.shape[0]
    out = np.empty((n, k), dtype=np.float64)
    if n * k * dim <= _DIRECT_LIMIT:
        step = max(1, (1 << 22) // max(1, k * dim))
        for lo in range(0, n, step):
            diff = pts[lo : lo + step, None, :] - cen[None, :, :]
            out[lo : lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
        return out
    cen_sq = np.einsum("kd,kd->k", cen, cen)
    step = max(1, (1 << 22) // max(1, k))
    for lo in range(0, n, step):
        chunk = pts[lo : lo + step]
        pts_sq = np.einsum("nd,nd->n", chunk, chunk)
        cross = chunk @ cen.T
        np.maximum(
            pts_sq[:, None] + cen_sq[None, :] - 2.0 * cross, 0.0, out=out[lo : lo + step]
        )
    return out


def assign_many(codebook: Codebook, vectors: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per row; ties go to the lowest index."""
    vecs = np.asarray(vectors, dtype=np.float64)
    if vecs.ndim != 2 or vecs.shape[1] != codebook.dim:
        raise ValueError(f"vectors must be (n, {codebook.dim}), got {vecs.shape}")
    return np.argmin(pairwise_sqdist(vecs, codebook.centroids), axis=1)


def assign(codebook: Codebook, vector: np.ndarray) -> int:
    """Index of the nearest centroid to one vector (ties: lowest index)."""
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (codebook.dim,):
        raise ValueError(f"vector must have shape ({codebook.dim},), got {vec.shape}")
    return int(assign_many(codebook, vec[None, :])[0])


def _seed_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initial centroids as copies of k training points."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = pairwise_sqdist(points, points[chosen[-1] : chosen[-1] + 1])[:, 0]
    while len(chosen) < k:
        total = float(d2.sum())
        if total > 0.0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # all remaining mass at distance zero (duplicate-heavy data)
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, pairwise_sqdist(points, points[nxt : nxt + 1])[:, 0])
    return points[np.array(chosen)].copy()


def _repair_empty(
    points: np.ndarray,
    old_centroids: np.ndarray,
    new_centroids: np.ndarray,
    empty: np.ndarray,
) -> None:
    """Reseed each empty cluster to the point farthest from its old centroid.

    Processed in ascending centroid order; a point already taken by an
    earlier repair in the same pass is skipped so repaired centroids stay
    distinct.  Ties go to the lowest point index.
    """
    taken: set[int] = set()
    for idx in np.flatnonzero(empty):
        dist = pairwise_sqdist(points, old_centroids[idx : idx + 1])[:, 0]
        if taken:
            dist[list(taken)] = -1.0
        far = int(np.argmax(dist))
        taken.add(far)
        new_centroids[idx] = points[far]


def train_codebook(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    *,
    max_iter: int = 100,
    rel_tol: float = 1e-4,
    sample_cap: int = 500_000,
    layer_name: str = "",
    scale_id: int = 1,
    initial_centroids: np.ndarray | None = None,
) -> Codebook:
    """Train a k-word codebook on a descriptor matrix.

    ``descriptors`` is ``(n, dim)`` with n >= k after subsampling.  When n
    exceeds ``sample_cap`` a uniform seeded subsample of that size is used.
    Convergence: stop once the relative inertia decrease falls below
    ``rel_tol`` (repair steps never trigger the stop), or after ``max_iter``
    assignment passes.  ``initial_centroids`` bypasses k-means++ seeding,
    for restarts and for tests that need a fixed start.
    """
    pts = np.asarray(descriptors, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"descriptors must be 2-D, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("descriptors must be finite")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    if rel_tol < 0.0:
        raise ValueError(f"rel_tol must be >= 0, got {rel_tol}")
    if sample_cap < k:
        raise ValueError(f"sample_cap {sample_cap} is below k={k}")

    rng = np.random.default_rng(seed)
    if pts.shape[0] > sample_cap:
        keep = rng.choice(pts.shape[0], size=sample_cap, replace=False)
        keep.sort()
        pts = pts[keep]
    n, dim = pts.shape
    if n < k:
        raise ValueError(f"need at least k={k} descriptors, got {n}")

    if initial_centroids is not None:
        centroids = np.asarray(initial_centroids, dtype=np.float64).copy()
        if centroids.shape != (k, dim):
            raise ValueError(
                f"initial_centroids must be ({k}, {dim}), got {centroids.shape}"
            )
    else:
        centroids = _seed_plus_plus(pts, k, rng)

    history: list[float] = []
    repairs: list[int] = []
    prev: float | None = None
    repaired_last = False
    iteration = 0
    while iteration < max_iter:
        iteration += 1
        d2 = pairwise_sqdist(pts, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), labels].sum())
        history.append(inertia)
        if prev is not None and not repaired_last:
            if prev == 0.0 or (prev - inertia) < rel_tol * prev:
                break
        prev = inertia
        if iteration == max_iter:
            break
        # M-step: fixed-order accumulation keeps the update deterministic
        sums = np.zeros((k, dim), dtype=np.float64)
        np.add.at(sums, labels, pts)
        counts = np.bincount(labels, minlength=k)
        empty = counts == 0
        new_centroids = sums / np.maximum(counts, 1)[:, None]
        repaired_last = False
        if empty.any():
            new_centroids[empty] = centroids[empty]
            _repair_empty(pts, centroids, new_centroids, empty)
            repairs.append(len(history))
            repaired_last = True
        centroids = new_centroids

    return Codebook(
        k=k,
        dim=dim,
        centroids=centroids,
        layer_name=layer_name,
        scale_id=scale_id,
        seed=seed,
        iterations_run=len(history),
        final_inertia=history[-1],
        inertia_history=tuple(history),
        repair_iterations=tuple(repairs),
    )


def save_codebook(codebook: Codebook, path: str | Path) -> None:
    blob = (
        CBK1_MAGIC
        + pack_u16(CBK1_VERSION)
        + pack_u32(codebook.k)
        + pack_u32(codebook.dim)
        + pack_u32(codebook.scale_id)
        + pack_u64(codebook.seed)
        + pack_u32(codebook.iterations_run)
        + pack_f64(codebook.final_inertia)
        + pack_str(codebook.layer_name)
        + pack_f64_array(codebook.centroids)
    )
    Path(path).write_bytes(blob)


def load_codebook(path: str | Path) -> Codebook:
    """Decode a .cbk1 file; the training log is not persisted and loads empty."""
    path = Path(path)
    reader = ByteReader(path.read_bytes(), str(path))
    reader.expect_magic(CBK1_MAGIC, "codebook")
    reader.expect_version(CBK1_VERSION)
    k = reader.u32()
    dim = reader.u32()
    scale_id = reader.u32()
    seed = reader.u64()
    iterations_run = reader.u32()
    final_inertia = reader.f64()
    layer_name = reader.str_u32()
    centroids = reader.f64_array(k * dim)
    reader.expect_end()
    if not np.all(np.isfinite(centroids)) or not np.isfinite(final_inertia):
        raise NonFinitePayloadError(f"{path}: non-finite codebook payload")
    if k < 1 or dim < 1:
        raise FormatError(f"{path}: bad dimensions k={k} dim={dim}")
    return Codebook(
        k=k,
        dim=dim,
        centroids=centroids.reshape(k, dim),
        layer_name=layer_name,
        scale_id=scale_id,
        seed=seed,
        iterations_run=iterations_run,
        final_inertia=final_inertia,
    )
