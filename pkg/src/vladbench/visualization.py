"""Qualitative views of what the local descriptors respond to.

Each grid cell of a feature map corresponds to an image patch: with image
side n and grid side g, patches are s = round(n / g) pixels and the cell
(i, j) maps to pixels [i*s : i*s+s, j*s : j*s+s] (clamped to stay in
bounds when g does not divide n).  Images are assumed to be the same square
warp the feature maps were computed from.

Two renderings:

* ``correspondence_mosaic``: rebuild one image by replacing every patch
  with the pixel mean of its k nearest database patches (by raw descriptor
  L2; the image's own patches are excluded unless asked otherwise).
* ``patch_clusters``: sample reference patches and show each next to its k
  nearest neighbors, nearest first.

Ties in descriptor distance are broken by ascending (image_id, i, j), so
both renderings are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import pairwise_sqdist
from .dataset import DatasetManifest
from .features import extract_descriptors, read_cfmp
from .ppm import read_ppm


@dataclass(frozen=True)
class PatchRef:
    """One grid cell of one image, with its pixel rectangle."""

    image_id: str
    layer_name: str
    scale_id: int
    grid_i: int
    grid_j: int
    rect: tuple[int, int, int]  # (y0, x0, side) in pixels


def patch_rect(image_side: int, grid_side: int, i: int, j: int) -> tuple[int, int, int]:
    """Pixel rectangle of grid cell (i, j); always fully inside the image."""
    if not (0 <= i < grid_side and 0 <= j < grid_side):
        raise ValueError(f"cell ({i}, {j}) outside {grid_side}x{grid_side} grid")
    side = round(image_side / grid_side)
    if side < 1:
        raise ValueError(
            f"image side {image_side} too small for a {grid_side}-cell grid"
        )
    y0 = min(i * side, image_side - side)
    x0 = min(j * side, image_side - side)
    return (y0, x0, side)


@dataclass(frozen=True, eq=False)
class PatchSource:
    """One image's raw descriptors plus the pixels they were computed from."""

    image_id: str
    layer_name: str
    scale_id: int
    descriptors: np.ndarray  # (grid_side**2, dim) float32, grid order
    image: np.ndarray  # (side, side, 3) uint8

    def __post_init__(self) -> None:
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] != img.shape[1]:
            raise ValueError(f"image must be square (n, n, 3), got {img.shape}")
        desc = np.asarray(self.descriptors, dtype=np.float32)
        if desc.ndim != 2:
            raise ValueError("descriptors must be a 2-D matrix")
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "descriptors", desc)

    @property
    def grid_side(self) -> int:
        side = int(np.sqrt(self.descriptors.shape[0]))
        if side * side != self.descriptors.shape[0]:
            raise ValueError("descriptor count is not a square grid")
        return side

    def patch(self, i: int, j: int) -> np.ndarray:
        y0, x0, side = patch_rect(self.image.shape[0], self.grid_side, i, j)
        return self.image[y0 : y0 + side, x0 : x0 + side]


def load_patch_sources(
    manifest: DatasetManifest, layer_name: str, scale_id: int
) -> list[PatchSource]:
    """Load every manifest image's feature map and pixels for one layer/scale."""
    sources = []
    for image_id in manifest.image_ids:
        fmap = read_cfmp(manifest.feature_path(image_id, layer_name, scale_id))
        image = read_ppm(manifest.image_path(image_id, scale_id))
        sources.append(
            PatchSource(
                image_id=image_id,
                layer_name=layer_name,
                scale_id=scale_id,
                descriptors=extract_descriptors(fmap).vectors,
                image=image,
            )
        )
    return sources


def _check_consistent(sources: list[PatchSource]) -> tuple[int, int]:
    """All sources must share image side and grid side; returns (n, g)."""
    if not sources:
        raise ValueError("no patch sources")
    image_side = sources[0].image.shape[0]
    grid_side = sources[0].grid_side
    dim = sources[0].descriptors.shape[1]
    for s in sources:
        if s.image.shape[0] != image_side or s.grid_side != grid_side:
            raise ValueError(
                f"source {s.image_id!r} has geometry "
                f"{s.image.shape[0]}px/{s.grid_side} cells, expected "
                f"{image_side}px/{grid_side} cells"
            )
        if s.descriptors.shape[1] != dim:
            raise ValueError(f"source {s.image_id!r} has mismatched descriptor dim")
    ids = [s.image_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids among patch sources")
    return image_side, grid_side


def _flatten(
    sources: list[PatchSource],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stack all patches: descriptor matrix plus per-patch (id, i, j) keys."""
    grid_side = sources[0].grid_side
    cells = grid_side * grid_side
    descriptors = np.concatenate([s.descriptors for s in sources]).astype(np.float64)
    ids = np.repeat(np.array([s.image_id for s in sources]), cells)
    rows = np.tile(np.repeat(np.arange(grid_side), grid_side), len(sources))
    cols = np.tile(np.tile(np.arange(grid_side), grid_side), len(sources))
    return descriptors, ids, rows, cols


def _nearest_patches(
    target: np.ndarray,
    db: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    k_nn: int,
    keep: np.ndarray,
) -> list[tuple[str, int, int]]:
    """k nearest database patches to one descriptor, tie-broken by (id, i, j)."""
    descriptors, ids, rows, cols = db
    dist = pairwise_sqdist(descriptors[keep], target[None, :])[:, 0]
    order = np.lexsort((cols[keep], rows[keep], ids[keep], dist))[:k_nn]
    kept = np.flatnonzero(keep)[order]
    return [(str(ids[p]), int(rows[p]), int(cols[p])) for p in kept]


def correspondence_mosaic(
    target_id: str,
    sources: list[PatchSource],
    k_nn: int,
    *,
    exclude_self: bool = True,
) -> np.ndarray:
    """Rebuild ``target_id`` from its nearest database patches.

    Every cell of the target becomes the pixel-wise mean of the ``k_nn``
    database patches with the closest raw descriptors.  Returns an
    (n, n, 3) uint8 image.
    """
    image_side, grid_side = _check_consistent(sources)
    if k_nn < 1:
        raise ValueError(f"k_nn must be >= 1, got {k_nn}")
    by_id = {s.image_id: s for s in sources}
    if target_id not in by_id:
        raise ValueError(f"target {target_id!r} not among the patch sources")
    target = by_id[target_id]
    db = _flatten(sources)
    keep = (
        db[1] != target_id
        if exclude_self
        else np.ones(db[0].shape[0], dtype=bool)
    )
    available = int(keep.sum())
    if available < k_nn:
        raise ValueError(f"only {available} database patches for k_nn={k_nn}")
    out = np.zeros((image_side, image_side, 3), dtype=np.uint8)
    target_desc = target.descriptors.astype(np.float64)
    for i in range(grid_side):
        for j in range(grid_side):
            nearest = _nearest_patches(
                target_desc[i * grid_side + j], db, k_nn, keep
            )
            stack = np.stack(
                [by_id[iid].patch(pi, pj).astype(np.float64) for iid, pi, pj in nearest]
            )
            y0, x0, side = patch_rect(image_side, grid_side, i, j)
            out[y0 : y0 + side, x0 : x0 + side] = np.round(
                stack.mean(axis=0)
            ).astype(np.uint8)
    return out


def patch_clusters(
    sources: list[PatchSource],
    n_rows: int,
    k_nn: int,
    seed: int,
) -> np.ndarray:
    """Reference patches beside their nearest neighbors, one row each.

    ``n_rows`` references are sampled without replacement (seeded) from all
    patches; each row shows the reference then its ``k_nn`` nearest other
    patches, ascending by distance.  Returns (n_rows*s, (k_nn+1)*s, 3) uint8.
    """
    image_side, grid_side = _check_consistent(sources)
    if n_rows < 1 or k_nn < 1:
        raise ValueError("n_rows and k_nn must be >= 1")
    db = _flatten(sources)
    total = db[0].shape[0]
    if n_rows > total:
        raise ValueError(f"cannot sample {n_rows} references from {total} patches")
    if total - 1 < k_nn:
        raise ValueError(f"only {total - 1} candidate neighbors for k_nn={k_nn}")
    by_id = {s.image_id: s for s in sources}
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=n_rows, replace=False)
    side = patch_rect(image_side, grid_side, 0, 0)[2]
    out = np.zeros((n_rows * side, (k_nn + 1) * side, 3), dtype=np.uint8)
    for row, pick in enumerate(picks):
        keep = np.ones(total, dtype=bool)
        keep[pick] = False  # the reference itself; exact duplicates stay in
        nearest = _nearest_patches(db[0][int(pick)], db, k_nn, keep)
        ref = (str(db[1][pick]), int(db[2][pick]), int(db[3][pick]))
        for col, (iid, pi, pj) in enumerate([ref] + nearest):
            patch = by_id[iid].patch(pi, pj)
            out[row * side : (row + 1) * side, col * side : (col + 1) * side] = patch
    return out
