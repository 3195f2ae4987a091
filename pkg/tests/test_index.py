from pathlib import Path

import numpy as np
import pytest

from instructmine.errors import (
    ChecksumMismatchError,
    DimensionMismatchError,
    EmptyIndexError,
    EmptyInputError,
    FormatVersionMismatchError,
    InvalidConfigError,
    ZeroVectorError,
)
from instructmine.fusion import patch_fusion
from instructmine.index import (
    PATCHES_PER_IMAGE,
    PatchKey,
    build_index,
    default_num_clusters,
    load,
    persist,
    search,
    search_exact,
)


def make_records(n_images, patches_per_image, dim, seed):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_images):
        for p in range(patches_per_image):
            key = PatchKey(f"img{i:04d}", 1, 0, 0) if p == 0 else PatchKey(
                f"img{i:04d}", 3, p % 3, (p // 3) % 3
            )
            records.append((key, rng.standard_normal(dim)))
    return records


@pytest.fixture(scope="module")
def small_index():
    return build_index(make_records(60, 5, 16, seed=0), num_clusters=12, seed=1)


class TestBuild:
    def test_orthogonal_separable(self):
        recs = [
            (PatchKey(f"i{j}", 1, 0, 0), np.eye(4)[j]) for j in range(4)
        ]
        idx = build_index(recs, num_clusters=4, seed=0)
        counts = np.diff(idx.list_offsets)
        assert sorted(counts.tolist()) == [1, 1, 1, 1]

    def test_single_cluster(self):
        idx = build_index(make_records(5, 3, 8, seed=2), num_clusters=1, seed=0)
        assert idx.num_clusters == 1
        assert int(np.diff(idx.list_offsets)[0]) == idx.num_records

    def test_partition_property(self):
        idx = build_index(make_records(1000, 10, 12, seed=3), num_clusters=64, seed=5)
        idx.check_invariants()
        assert int(np.diff(idx.list_offsets).sum()) == 10_000

    def test_empty_input(self):
        with pytest.raises(EmptyInputError):
            build_index([], num_clusters=1, seed=0)

    def test_dimension_mismatch(self):
        recs = [
            (PatchKey("a", 1, 0, 0), np.ones(4)),
            (PatchKey("b", 1, 0, 0), np.ones(5)),
        ]
        with pytest.raises(DimensionMismatchError):
            build_index(recs, num_clusters=1, seed=0)

    def test_zero_record_rejected(self):
        recs = [(PatchKey("a", 1, 0, 0), np.zeros(4))]
        with pytest.raises(ZeroVectorError):
            build_index(recs, num_clusters=1, seed=0)

    def test_too_many_clusters(self):
        recs = make_records(2, 2, 8, seed=0)
        with pytest.raises(InvalidConfigError):
            build_index(recs, num_clusters=10, seed=0)

    def test_determinism(self):
        recs = make_records(40, 6, 8, seed=9)
        a = build_index(recs, num_clusters=10, seed=4)
        b = build_index(recs, num_clusters=10, seed=4)
        np.testing.assert_array_equal(a.records, b.records)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        assert a.keys == b.keys

    def test_default_num_clusters(self):
        assert default_num_clusters(1) == 1
        assert default_num_clusters(100) == 10
        assert default_num_clusters(101) == 11
        assert default_num_clusters(10**9) == 4096


class TestSearch:
    def test_full_probe_equals_exact(self, small_index):
        rng = np.random.default_rng(10)
        for _ in range(25):
            q = rng.standard_normal(16)
            approx = search(small_index, q, k=20, nprobe=small_index.num_clusters)
            exact = search_exact(small_index, q, k=20)
            assert approx.ranked.items == exact.ranked.items
            assert approx.per_image_best_patch == exact.per_image_best_patch

    def test_k_larger_than_image_count(self, small_index):
        res = search_exact(small_index, np.ones(16), k=10_000)
        assert len(res.ranked) == small_index.num_images

    def test_planted_query_recovered(self):
        recs = make_records(30, 4, 8, seed=6)
        planted_key, planted_vec = recs[57]
        idx = build_index(recs, num_clusters=6, seed=0)
        res = search(idx, planted_vec, k=1, nprobe=idx.num_clusters)
        top = res.ranked.items[0]
        assert top.item_id == planted_key.image_id
        assert top.score == pytest.approx(1.0, abs=1e-6)
        assert res.per_image_best_patch[top.item_id] == planted_key

    def test_matches_naive_nested_loop_oracle(self):
        # second brute-force oracle, written with plain loops over dicts
        recs = make_records(50, 4, 8, seed=8)
        idx = build_index(recs, num_clusters=7, seed=2)
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = rng.standard_normal(8)
            qn = q / np.linalg.norm(q)
            by_image: dict[str, list[float]] = {}
            for key, vec in recs:
                v = np.asarray(vec, dtype=np.float32)
                v = v / np.linalg.norm(v)
                score = float(np.dot(v.astype(np.float64), qn))
                by_image.setdefault(key.image_id, []).append(score)
            fused = patch_fusion(by_image)
            expected = sorted(fused.items(), key=lambda p: (-p[1], p[0]))[:10]
            got = search_exact(idx, q, k=10)
            assert [i.item_id for i in got.ranked] == [i for i, _ in expected]
            for (id_a, score_a), item in zip(expected, got.ranked):
                assert item.score == pytest.approx(score_a, abs=1e-5)

    def test_empty_index_guard(self, small_index):
        import dataclasses

        empty = dataclasses.replace(
            small_index,
            records=np.zeros((0, 16), dtype=np.float32),
            keys=(),
            norm_cache=np.zeros(0, dtype=np.float32),
            assignments=np.zeros(0, dtype=np.int32),
            list_offsets=np.zeros(small_index.num_clusters + 1, dtype=np.int64),
        )
        with pytest.raises(EmptyIndexError):
            search_exact(empty, np.ones(16), k=1)

    def test_single_record(self):
        idx = build_index([(PatchKey("only", 1, 0, 0), np.array([1.0, 2.0]))], 1, 0)
        res = search_exact(idx, np.array([1.0, 2.0]), k=5)
        assert res.ranked.ids() == ["only"]
        assert res.ranked.items[0].score == pytest.approx(1.0, abs=1e-6)

    def test_query_dimension_mismatch(self, small_index):
        with pytest.raises(DimensionMismatchError):
            search_exact(small_index, np.ones(5), k=1)

    def test_nprobe_bounds(self, small_index):
        with pytest.raises(InvalidConfigError):
            search(small_index, np.ones(16), k=1, nprobe=0)
        with pytest.raises(InvalidConfigError):
            search(small_index, np.ones(16), k=1, nprobe=small_index.num_clusters + 1)

    def test_recall_monotone_in_nprobe(self, small_index):
        rng = np.random.default_rng(20)
        probes = [1, 2, 4, 8, small_index.num_clusters]
        recalls = []
        queries = rng.standard_normal((100, 16))
        exact_sets = [
            set(search_exact(small_index, q, k=10).ranked.ids()) for q in queries
        ]
        for p in probes:
            hits = 0
            for q, exact_ids in zip(queries, exact_sets):
                got = set(search(small_index, q, k=10, nprobe=p).ranked.ids())
                hits += len(got & exact_ids)
            recalls.append(hits / (10 * len(queries)))
        assert all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))
        assert recalls[-1] == pytest.approx(1.0)


class TestPersistence:
    def test_roundtrip_searches_identical(self, small_index, tmp_path):
        path = tmp_path / "index.bin"
        persist(small_index, path)
        loaded = load(path)
        rng = np.random.default_rng(30)
        for _ in range(100):
            q = rng.standard_normal(16)
            a = search_exact(small_index, q, k=15)
            b = search_exact(loaded, q, k=15)
            assert a.ranked.items == b.ranked.items
            assert a.per_image_best_patch == b.per_image_best_patch

    def test_roundtrip_preserves_fields(self, small_index, tmp_path):
        path = tmp_path / "index.bin"
        persist(small_index, path)
        loaded = load(path)
        np.testing.assert_array_equal(loaded.records, small_index.records)
        np.testing.assert_array_equal(loaded.norm_cache, small_index.norm_cache)
        assert loaded.keys == small_index.keys
        assert loaded.config == small_index.config

    def test_truncated_file(self, small_index, tmp_path):
        path = tmp_path / "index.bin"
        persist(small_index, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ChecksumMismatchError):
            load(path)

    def test_corrupted_payload(self, small_index, tmp_path):
        path = tmp_path / "index.bin"
        persist(small_index, path)
        raw = bytearray(path.read_bytes())
        raw[100] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumMismatchError):
            load(path)

    def test_wrong_magic(self, small_index, tmp_path):
        path = tmp_path / "index.bin"
        persist(small_index, path)
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTMAGIC"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatVersionMismatchError):
            load(path)

    def test_byte_identical_rebuild(self, tmp_path):
        recs = make_records(20, 5, 8, seed=12)
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        persist(build_index(recs, num_clusters=5, seed=3), p1)
        persist(build_index(recs, num_clusters=5, seed=3), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestPatchKey:
    def test_grid_validation(self):
        PatchKey("i", 3, 2, 2).validate()
        with pytest.raises(ValueError):
            PatchKey("i", 3, 3, 0).validate()
        with pytest.raises(ValueError):
            PatchKey("i", 4, 0, 0).validate()

    def test_bbox_validation(self):
        PatchKey("i", 0, 0, 0, "bb1").validate()
        with pytest.raises(ValueError):
            PatchKey("i", 0, 0, 0, "").validate()
        with pytest.raises(ValueError):
            PatchKey("i", 3, 0, 0, "bb1").validate()

    def test_patch_count_constant(self):
        assert PATCHES_PER_IMAGE == 165
