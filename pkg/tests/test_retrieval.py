"""Exact-scan retrieval against a double-loop python oracle."""

import math

import numpy as np
import pytest

from vladbench import (
    RetrievalIndex,
    VladDescriptor,
    build_index,
    index_from_vlads,
    load_descriptor_matrix,
    query,
    query_by_id,
    save_descriptor_matrix,
)


def rank_oracle(ids, vectors, q):
    """Distances by explicit summation, ordered by (distance, id)."""
    rows = []
    for iid, vec in zip(ids, vectors):
        d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(vec, q)))
        rows.append((d, iid))
    rows.sort()
    return [iid for _, iid in rows], [d for d, _ in rows]


def make_index(rng, n=50, dim=8):
    ids = [f"img{i:04d}" for i in range(n)]
    return build_index(ids, rng.standard_normal((n, dim)))


class TestQuery:
    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        index = make_index(rng, n=200, dim=10)
        for _ in range(20):
            q = rng.standard_normal(10)
            got = query(index, q)
            want_ids, want_dists = rank_oracle(index.image_ids, index.vectors, q)
            assert list(got.image_ids) == want_ids
            np.testing.assert_allclose(got.distances, want_dists, atol=1e-9)

    def test_distances_ascend(self):
        rng = np.random.default_rng(1)
        index = make_index(rng)
        got = query(index, rng.standard_normal(8))
        assert np.all(np.diff(got.distances) >= 0.0)

    def test_ties_break_by_ascending_id(self):
        # three database points at the same distance from the origin
        vectors = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [5.0, 5.0]])
        index = build_index(["zz", "mm", "aa", "far"], vectors)
        got = query(index, np.zeros(2))
        assert got.image_ids == ("aa", "mm", "zz", "far")
        np.testing.assert_allclose(got.distances[:3], 1.0, atol=0.0)

    def test_top_k_truncates_after_sorting(self):
        rng = np.random.default_rng(2)
        index = make_index(rng)
        q = rng.standard_normal(8)
        full = query(index, q)
        top = query(index, q, top_k=5)
        assert top.image_ids == full.image_ids[:5]
        np.testing.assert_array_equal(top.distances, full.distances[:5])

    def test_exclude_removes_ids(self):
        rng = np.random.default_rng(3)
        index = make_index(rng, n=10)
        q = rng.standard_normal(8)
        full = query(index, q)
        drop = {full.image_ids[0], full.image_ids[3]}
        got = query(index, q, exclude=drop)
        assert set(got.image_ids) == set(full.image_ids) - drop
        assert list(got.image_ids) == [i for i in full.image_ids if i not in drop]

    def test_exclude_unknown_id_is_ignored(self):
        rng = np.random.default_rng(4)
        index = make_index(rng, n=6)
        q = rng.standard_normal(8)
        got = query(index, q, exclude={"no-such-image"})
        assert len(got.image_ids) == 6

    def test_query_by_id_excludes_self_by_default(self):
        rng = np.random.default_rng(5)
        index = make_index(rng, n=12)
        got = query_by_id(index, "img0007")
        assert "img0007" not in got.image_ids
        kept = query_by_id(index, "img0007", exclude_self=False)
        assert kept.image_ids[0] == "img0007"
        assert kept.distances[0] == 0.0

    def test_query_by_id_unknown_raises(self):
        rng = np.random.default_rng(6)
        index = make_index(rng, n=4)
        with pytest.raises(KeyError, match="nope"):
            query_by_id(index, "nope")

    def test_bad_query_shapes(self):
        rng = np.random.default_rng(7)
        index = make_index(rng, n=4)
        with pytest.raises(ValueError, match="shape"):
            query(index, np.zeros(3))
        with pytest.raises(ValueError, match="finite"):
            query(index, np.full(8, np.nan))
        with pytest.raises(ValueError, match="top_k"):
            query(index, np.zeros(8), top_k=0)


class TestIndexConstruction:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            build_index(["a", "b", "a"], np.zeros((3, 2)))

    def test_non_finite_rejected(self):
        vecs = np.zeros((2, 2))
        vecs[1, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            build_index(["a", "b"], vecs)

    def test_vector_for_and_contains(self):
        rng = np.random.default_rng(8)
        index = make_index(rng, n=5)
        assert "img0002" in index
        assert "other" not in index
        np.testing.assert_array_equal(index.vector_for("img0002"), index.vectors[2])

    def test_from_vlads_requires_matching_configuration(self):
        def vd(image_id, k):
            return VladDescriptor(
                image_id=image_id, layer_name="conv3", scale_ids=(1,), k=k,
                dim_per_word=2, normalization="intra+l2",
                values=np.ones(k * 2) / math.sqrt(k * 2),
            )

        index = index_from_vlads([vd("a", 2), vd("b", 2)])
        assert index.count == 2 and index.dim == 4
        with pytest.raises(ValueError, match="does not match"):
            index_from_vlads([vd("a", 2), vd("b", 3)])


class TestMatrixIO:
    def test_roundtrip_on_float32_values(self, tmp_path):
        rng = np.random.default_rng(9)
        vecs = rng.standard_normal((7, 5)).astype(np.float32).astype(np.float64)
        index = build_index([f"i{n}" for n in range(7)], vecs)
        path = tmp_path / "db.cds1"
        save_descriptor_matrix(index, path)
        loaded = load_descriptor_matrix(path)
        assert loaded.image_ids == index.image_ids
        np.testing.assert_array_equal(loaded.vectors, index.vectors)

    def test_loaded_index_ranks_identically(self, tmp_path):
        rng = np.random.default_rng(10)
        vecs = rng.standard_normal((30, 6)).astype(np.float32).astype(np.float64)
        index = build_index([f"i{n:03d}" for n in range(30)], vecs)
        path = tmp_path / "db.cds1"
        save_descriptor_matrix(index, path)
        loaded = load_descriptor_matrix(path)
        q = rng.standard_normal(6)
        a, b = query(index, q), query(loaded, q)
        assert a.image_ids == b.image_ids
        np.testing.assert_array_equal(a.distances, b.distances)

    def test_truncated_file(self, tmp_path):
        from vladbench import TruncatedFileError

        rng = np.random.default_rng(11)
        index = make_index(rng, n=3, dim=2)
        path = tmp_path / "db.cds1"
        save_descriptor_matrix(index, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(TruncatedFileError):
            load_descriptor_matrix(path)
