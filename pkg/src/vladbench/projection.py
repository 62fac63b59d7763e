"""PCA with whitening for compressing aggregated descriptors.

The projection is the eigendecomposition of the sample covariance of the
training descriptors (divisor n-1).  Basis rows are orthonormal covariance
eigenvectors ordered by non-increasing eigenvalue, with a deterministic sign:
the largest-magnitude entry of each row is made positive (ties: earliest
index).  Projecting maps v to ``basis @ (v - mean)``, divides each component
by ``sqrt(eigenvalue + epsilon)`` (whitening), then L2-normalizes.

On-disk format (``.prj1``, version 1, little-endian)::

    magic   "PRJ1"              4 bytes
    version u16 = 1
    dim_in  u32
    dim_out u32
    whiten_epsilon f64
    mean        dim_in float64
    basis       dim_out*dim_in float64, row-major
    eigenvalues dim_out float64

Everything is float64 end to end, so save/load round-trips bit-exactly and a
loaded projection projects identically to the fitted one.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import (
    ByteReader,
    pack_f64,
    pack_f64_array,
    pack_u16,
    pack_u32,
)
from .errors import FormatError, NonFinitePayloadError

PRJ1_MAGIC = b"PRJ1"
PRJ1_VERSION = 1

DEFAULT_WHITEN_EPSILON = 1e-9


@dataclass(frozen=True, eq=False)
class Projection:
    dim_in: int
    dim_out: int
    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    whiten_epsilon: float

    def __post_init__(self) -> None:
        if self.dim_in < 1 or self.dim_out < 1:
            raise ValueError("dim_in and dim_out must be >= 1")
        if self.dim_out > self.dim_in:
            raise ValueError(f"dim_out {self.dim_out} exceeds dim_in {self.dim_in}")
        if not (self.whiten_epsilon > 0.0):
            raise ValueError(f"whiten_epsilon must be > 0, got {self.whiten_epsilon}")
        mean = np.asarray(self.mean, dtype=np.float64)
        basis = np.asarray(self.basis, dtype=np.float64)
        eig = np.asarray(self.eigenvalues, dtype=np.float64)
        if mean.shape != (self.dim_in,):
            raise ValueError(f"mean must be ({self.dim_in},), got {mean.shape}")
        if basis.shape != (self.dim_out, self.dim_in):
            raise ValueError(
                f"basis must be ({self.dim_out}, {self.dim_in}), got {basis.shape}"
            )
        if eig.shape != (self.dim_out,):
            raise ValueError(f"eigenvalues must be ({self.dim_out},), got {eig.shape}")
        if not (
            np.all(np.isfinite(mean))
            and np.all(np.isfinite(basis))
            and np.all(np.isfinite(eig))
        ):
            raise ValueError("projection parameters must be finite")
        if np.any(eig < 0.0):
            raise ValueError("eigenvalues must be non-negative")
        if np.any(np.diff(eig) > 0.0):
            raise ValueError("eigenvalues must be non-increasing")
        for name, arr in (("mean", mean), ("basis", basis), ("eigenvalues", eig)):
            arr = np.ascontiguousarray(arr).copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Projection):
            return NotImplemented
        return (
            self.dim_in == other.dim_in
            and self.dim_out == other.dim_out
            and self.whiten_epsilon == other.whiten_epsilon
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.basis, other.basis)
            and np.array_equal(self.eigenvalues, other.eigenvalues)
        )


def fit_pca_whiten(
    samples: np.ndarray,
    dim_out: int,
    *,
    whiten_epsilon: float = DEFAULT_WHITEN_EPSILON,
) -> Projection:
    """Fit the projection on an (n, dim_in) sample matrix.

    Requires ``dim_out <= min(dim_in, n - 1)`` so every kept direction is
    identified by the data.  Computed via SVD of the centered samples, which
    agrees with the covariance eigendecomposition: eigenvalue_i = s_i^2/(n-1).
    """
    mat = np.asarray(samples, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"samples must be 2-D, got shape {mat.shape}")
    n, dim_in = mat.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if not np.all(np.isfinite(mat)):
        raise ValueError("samples must be finite")
    limit = min(dim_in, n - 1)
    if not (1 <= dim_out <= limit):
        raise ValueError(
            f"dim_out must be in [1, {limit}] for {n} samples of dim {dim_in}, "
            f"got {dim_out}"
        )
    mean = mat.mean(axis=0)
    centered = mat - mean
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    eigenvalues = (singular[:dim_out] ** 2) / (n - 1)
    basis = vt[:dim_out].copy()
    for row in basis:
        anchor = int(np.argmax(np.abs(row)))
        if row[anchor] < 0.0:
            np.negative(row, out=row)
    return Projection(
        dim_in=dim_in,
        dim_out=dim_out,
        mean=mean,
        basis=basis,
        eigenvalues=eigenvalues,
        whiten_epsilon=whiten_epsilon,
    )


def project_many(
    projection: Projection,
    vectors: np.ndarray,
    *,
    whiten: bool = True,
    l2: bool = True,
) -> np.ndarray:
    """Project rows of an (n, dim_in) matrix; see ``project``."""
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != projection.dim_in:
        raise ValueError(f"vectors must be (n, {projection.dim_in}), got {mat.shape}")
    out = (mat - projection.mean) @ projection.basis.T
    if whiten:
        out = out / np.sqrt(projection.eigenvalues + projection.whiten_epsilon)
    if l2:
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        out = out / np.where(norms == 0.0, 1.0, norms)
    return out


def project(
    projection: Projection,
    vector: np.ndarray,
    *,
    whiten: bool = True,
    l2: bool = True,
) -> np.ndarray:
    """Center, rotate, whiten, and L2-normalize one vector.

    ``whiten=False`` skips the eigenvalue scaling and ``l2=False`` the final
    normalization (ablations); a vector projecting to all zeros stays zero.
    """
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (projection.dim_in,):
        raise ValueError(f"vector must have shape ({projection.dim_in},), got {vec.shape}")
    return project_many(projection, vec[None, :], whiten=whiten, l2=l2)[0]


def save_projection(projection: Projection, path: str | Path) -> None:
    blob = (
        PRJ1_MAGIC
        + pack_u16(PRJ1_VERSION)
        + pack_u32(projection.dim_in)
        + pack_u32(projection.dim_out)
        + pack_f64(projection.whiten_epsilon)
        + pack_f64_array(projection.mean)
        + pack_f64_array(projection.basis)
        + pack_f64_array(projection.eigenvalues)
    )
    Path(path).write_bytes(blob)


def load_projection(path: str | Path) -> Projection:
    path = Path(path)
    reader = ByteReader(path.read_bytes(), str(path))
    reader.expect_magic(PRJ1_MAGIC, "projection")
    reader.expect_version(PRJ1_VERSION)
    dim_in = reader.u32()
    dim_out = reader.u32()
    whiten_epsilon = reader.f64()
    mean = reader.f64_array(dim_in)
    basis = reader.f64_array(dim_out * dim_in)
    eigenvalues = reader.f64_array(dim_out)
    reader.expect_end()
    if not (
        np.all(np.isfinite(mean))
        and np.all(np.isfinite(basis))
        and np.all(np.isfinite(eigenvalues))
        and np.isfinite(whiten_epsilon)
    ):
        raise NonFinitePayloadError(f"{path}: non-finite projection payload")
    try:
        return Projection(
            dim_in=dim_in,
            dim_out=dim_out,
            mean=mean,
            basis=basis.reshape(dim_out, dim_in),
            eigenvalues=eigenvalues,
            whiten_epsilon=whiten_epsilon,
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
