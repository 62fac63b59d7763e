"""Patch geometry and the nearest-patch renderings."""

import numpy as np
import pytest

from vladbench import (
    PatchSource,
    correspondence_mosaic,
    patch_clusters,
    patch_rect,
)


def nearest_oracle(target, entries, k_nn):
    """Linear scan over (descriptor, id, i, j) rows, sorted by (d, id, i, j)."""
    scored = []
    for desc, iid, i, j in entries:
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(desc, target))
        scored.append((d, iid, i, j))
    scored.sort()
    return [(iid, i, j) for _, iid, i, j in scored[:k_nn]]


def make_source(rng, image_id, grid_side=3, patch_pixels=4, dim=5, descriptors=None):
    n = grid_side * patch_pixels
    if descriptors is None:
        descriptors = rng.standard_normal((grid_side * grid_side, dim)).astype(np.float32)
    image = rng.integers(0, 256, size=(n, n, 3), dtype=np.uint8)
    return PatchSource(
        image_id=image_id, layer_name="conv3", scale_id=1,
        descriptors=descriptors, image=image,
    )


class TestPatchRect:
    def test_exact_division(self):
        assert patch_rect(12, 3, 0, 0) == (0, 0, 4)
        assert patch_rect(12, 3, 2, 1) == (8, 4, 4)

    def test_rounding_and_clamping(self):
        # 10 px over 3 cells: side = round(10/3) = 3, last row clamps to 7
        assert patch_rect(10, 3, 0, 0) == (0, 0, 3)
        assert patch_rect(10, 3, 2, 2) == (6, 6, 3)
        # 11 px over 3 cells: side = 4, cell 2 starts at 8 but clamps to 7
        assert patch_rect(11, 3, 2, 0) == (7, 0, 4)

    def test_out_of_grid_cell(self):
        with pytest.raises(ValueError, match="outside"):
            patch_rect(12, 3, 3, 0)

    def test_degenerate_patch(self):
        with pytest.raises(ValueError, match="too small"):
            patch_rect(2, 5, 0, 0)

    def test_every_rect_in_bounds(self):
        for n in range(3, 30):
            for g in range(1, n + 1):
                if round(n / g) < 1:
                    continue
                for i in range(g):
                    for j in range(g):
                        y0, x0, side = patch_rect(n, g, i, j)
                        assert 0 <= y0 and y0 + side <= n
                        assert 0 <= x0 and x0 + side <= n


class TestPatchSource:
    def test_patch_slices_expected_pixels(self):
        rng = np.random.default_rng(0)
        src = make_source(rng, "a", grid_side=2, patch_pixels=3)
        np.testing.assert_array_equal(src.patch(1, 0), src.image[3:6, 0:3])
        assert src.grid_side == 2

    def test_rejects_non_square_image(self):
        with pytest.raises(ValueError, match="square"):
            PatchSource(
                image_id="a", layer_name="l", scale_id=1,
                descriptors=np.zeros((4, 2), dtype=np.float32),
                image=np.zeros((4, 6, 3), dtype=np.uint8),
            )

    def test_rejects_non_square_grid(self):
        src = PatchSource(
            image_id="a", layer_name="l", scale_id=1,
            descriptors=np.zeros((5, 2), dtype=np.float32),
            image=np.zeros((6, 6, 3), dtype=np.uint8),
        )
        with pytest.raises(ValueError, match="square grid"):
            _ = src.grid_side


class TestMosaic:
    def test_self_reconstruction_is_identity(self):
        # k_nn=1 with self included: every patch's nearest descriptor is
        # itself, so the mosaic reproduces the image exactly
        rng = np.random.default_rng(1)
        sources = [make_source(rng, f"s{i}") for i in range(3)]
        out = correspondence_mosaic("s1", sources, 1, exclude_self=False)
        np.testing.assert_array_equal(out, sources[1].image)

    def test_matches_nearest_patch_oracle(self):
        rng = np.random.default_rng(2)
        sources = [make_source(rng, f"s{i}", grid_side=2) for i in range(4)]
        target = sources[0]
        out = correspondence_mosaic("s0", sources, 1)
        entries = [
            (s.descriptors[i * 2 + j], s.image_id, i, j)
            for s in sources
            if s.image_id != "s0"
            for i in range(2)
            for j in range(2)
        ]
        by_id = {s.image_id: s for s in sources}
        for i in range(2):
            for j in range(2):
                (iid, pi, pj), = nearest_oracle(
                    target.descriptors[i * 2 + j].astype(np.float64), entries, 1
                )
                y0, x0, side = patch_rect(target.image.shape[0], 2, i, j)
                np.testing.assert_array_equal(
                    out[y0 : y0 + side, x0 : x0 + side], by_id[iid].patch(pi, pj)
                )

    def test_mean_of_k_patches(self):
        rng = np.random.default_rng(3)
        sources = [make_source(rng, f"s{i}", grid_side=1, patch_pixels=2) for i in range(5)]
        out = correspondence_mosaic("s0", sources, 4)
        stack = np.stack([s.image.astype(np.float64) for s in sources[1:]])
        want = np.round(stack.mean(axis=0)).astype(np.uint8)
        np.testing.assert_array_equal(out, want)

    def test_validation(self):
        rng = np.random.default_rng(4)
        sources = [make_source(rng, f"s{i}") for i in range(2)]
        with pytest.raises(ValueError, match="not among"):
            correspondence_mosaic("missing", sources, 1)
        with pytest.raises(ValueError, match="k_nn"):
            correspondence_mosaic("s0", sources, 0)
        with pytest.raises(ValueError, match="database patches"):
            correspondence_mosaic("s0", sources, 10)  # only 9 non-self patches

    def test_geometry_mismatch(self):
        rng = np.random.default_rng(5)
        a = make_source(rng, "a", grid_side=3, patch_pixels=4)
        b = make_source(rng, "b", grid_side=2, patch_pixels=6)  # same 12px image
        with pytest.raises(ValueError, match="geometry"):
            correspondence_mosaic("a", [a, b], 1)


class TestPatchClusters:
    def test_output_shape_and_reference_column(self):
        rng = np.random.default_rng(6)
        sources = [make_source(rng, f"s{i}") for i in range(3)]
        out = patch_clusters(sources, n_rows=4, k_nn=3, seed=9)
        assert out.shape == (4 * 4, (3 + 1) * 4, 3)
        assert out.dtype == np.uint8

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(7)
        sources = [make_source(rng, f"s{i}") for i in range(3)]
        a = patch_clusters(sources, n_rows=3, k_nn=2, seed=5)
        b = patch_clusters(sources, n_rows=3, k_nn=2, seed=5)
        c = patch_clusters(sources, n_rows=3, k_nn=2, seed=6)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_duplicate_descriptor_found_at_distance_zero(self):
        # two images share identical descriptors: for any reference, the
        # neighbor column must show the duplicate's patch (distance 0,
        # earlier image id wins the tie)
        rng = np.random.default_rng(8)
        shared = rng.standard_normal((1, 4)).astype(np.float32)
        a = make_source(rng, "a", grid_side=1, patch_pixels=2, descriptors=shared)
        b = make_source(rng, "b", grid_side=1, patch_pixels=2, descriptors=shared.copy())
        far = make_source(
            rng, "c", grid_side=1, patch_pixels=2,
            descriptors=shared + 100.0,
        )
        out = patch_clusters([a, b, far], n_rows=3, k_nn=1, seed=0)
        # every reference row: reference patch then its nearest neighbor
        rows = {tuple(out[r * 2 : r * 2 + 2, 0:2].ravel()): out[r * 2 : r * 2 + 2, 2:4]
                for r in range(3)}
        key_a = tuple(a.image[0:2, 0:2].ravel())
        key_b = tuple(b.image[0:2, 0:2].ravel())
        np.testing.assert_array_equal(rows[key_a], b.image[0:2, 0:2])
        np.testing.assert_array_equal(rows[key_b], a.image[0:2, 0:2])

    def test_validation(self):
        rng = np.random.default_rng(9)
        sources = [make_source(rng, "a", grid_side=2)]
        with pytest.raises(ValueError, match="sample"):
            patch_clusters(sources, n_rows=5, k_nn=1, seed=0)
        with pytest.raises(ValueError, match="candidate neighbors"):
            patch_clusters(sources, n_rows=1, k_nn=4, seed=0)
