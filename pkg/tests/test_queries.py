import numpy as np
import pytest

from conftest import two_mode_instance

from instructmine import fusion
from instructmine.errors import InvalidConfigError
from instructmine.index import search
from instructmine.queries import Query, fused_query_vector, run_query, run_query_set


@pytest.fixture(scope="module")
def world():
    return two_mode_instance()


def test_query_needs_a_modality():
    with pytest.raises(InvalidConfigError):
        Query()


def test_masking(world):
    _, bundle, _, _ = world
    q = Query(text=bundle.texts["a photo of alpha"], visual=bundle.bboxes["bb_a1"])
    assert q.texts_only().visual is None
    assert q.bboxes_only().text is None
    with pytest.raises(InvalidConfigError):
        q.texts_only().texts_only().bboxes_only()


def test_unknown_policy(world):
    _, bundle, index, _ = world
    q = Query(text=bundle.texts["a photo of alpha"])
    with pytest.raises(InvalidConfigError):
        run_query(index, q, "mystery", 5, 3)


def test_single_modality_ignores_policy(world):
    _, bundle, index, _ = world
    q = Query(text=bundle.texts["a photo of alpha"])
    results = {
        policy: run_query(index, q, policy, 12, 300).ids()
        for policy in ("single_text", "sum", "weighted", "rank", "naive")
    }
    baseline = results["single_text"]
    assert all(ids == baseline for ids in results.values())


def test_early_policies_match_fusion_functions(world):
    _, bundle, index, _ = world
    t, v = bundle.texts["a photo of alpha"], bundle.bboxes["bb_b1"]
    q = Query(text=t, visual=v)
    np.testing.assert_allclose(
        fused_query_vector(q, "sum"), fusion.sum_fusion_query(t, v)
    )
    np.testing.assert_allclose(
        fused_query_vector(q, "weighted"), fusion.weighted_fusion_query(t, v)
    )
    got = run_query(index, q, "sum", 12, 300)
    direct = search(index, fusion.sum_fusion_query(t, v), 12, index.num_clusters)
    assert got.items == direct.ranked.items


def test_late_policies_combine_two_searches(world):
    _, bundle, index, _ = world
    t, v = bundle.texts["a photo of alpha"], bundle.bboxes["bb_b1"]
    q = Query(text=t, visual=v)
    lt = search(index, t, 12, index.num_clusters).ranked
    lv = search(index, v, 12, index.num_clusters).ranked
    assert run_query(index, q, "rank", 12, 300).items == fusion.rank_fusion_merge(lt, lv, 12).items
    assert run_query(index, q, "naive", 12, 300).items == fusion.naive_interleave(lt, lv, 12).items


def test_run_query_set_merges(world):
    _, bundle, index, _ = world
    qa = Query(text=bundle.texts["a photo of alpha"])
    qb = Query(text=bundle.texts["a photo of beta"])
    merged = run_query_set(index, [qa, qb], "sum", "max", 12, 300)
    la = run_query(index, qa, "sum", 12, 300)
    lb = run_query(index, qb, "sum", 12, 300)
    assert merged.items == fusion.merge_results([la, lb], "max", 12).items
    with pytest.raises(InvalidConfigError):
        run_query_set(index, [qa], "sum", "median", 12, 300)


def test_nprobe_clamped_to_cluster_count(world):
    _, bundle, index, _ = world
    q = Query(text=bundle.texts["a photo of alpha"])
    assert run_query(index, q, "sum", 12, 10_000).items == run_query(index, q, "sum", 12, index.num_clusters).items
