"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured numbers.

Quantitative targets on the synthetic world are regression values frozen
from the first oracle run of the tuned generator (seed 0 world, seed 0
folds). Run with ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see
the lines while running).
"""

import itertools
import json
import time

import numpy as np
import pytest

from conftest import brute_force_ap, two_mode_instance

from instructmine import fusion
from instructmine.cli import main as cli_main
from instructmine.dataset import build_candidate_pool
from instructmine.evaluate import EvalConfig, compare_methods
from instructmine.index import PatchKey, build_index, search, search_exact
from instructmine.metrics import ap_at_k
from instructmine.queries import Query, run_query_set
from instructmine.selection import (
    SelectionConfig,
    auc_of_results,
    candidate_pairs,
    greedy_select,
    score_pair,
)
from instructmine.synth import SynthConfig, mode_b_config, synth_generate


@pytest.fixture
def announce(capsys):
    def _announce(criterion: str, passed: bool, detail: str):
        with capsys.disabled():
            status = "PASS" if passed else "FAIL"
            print(f"[{status}] {criterion}: {detail}")

    return _announce


def test_fusion_identity_suite(announce):
    """Sum-fusion score/ranking identity, weighted w=0 and w=1 behavior."""
    t0 = time.time()
    rng = np.random.default_rng(20240001)
    ok = True

    # score identity on 1000 random unit triples, both sides evaluated directly
    max_diff = 0.0
    for _ in range(1000):
        a, b, x = rng.standard_normal((3, 16))
        q = fusion.sum_fusion_query(a, b)
        lhs = fusion.single_score(q, x) * np.linalg.norm(q)
        rhs = fusion.single_score(a, x) + fusion.single_score(b, x)
        max_diff = max(max_diff, abs(lhs - rhs))
    ok &= max_diff < 1e-6

    # ranking equivalence: argsort equality with ascending-id tie-break
    rank_ok = True
    for _ in range(25):
        qt, qv = rng.standard_normal((2, 16))
        cands = {f"i{j:03d}": rng.standard_normal(16) for j in range(40)}
        q = fusion.sum_fusion_query(qt, qv)
        early = fusion.RankedList.from_scores(
            {i: fusion.single_score(q, c) for i, c in cands.items()}
        )
        late = fusion.RankedList.from_scores(
            {
                i: fusion.single_score(qt, c) + fusion.single_score(qv, c)
                for i, c in cands.items()
            }
        )
        rank_ok &= early.ids() == late.ids()
    ok &= rank_ok

    # weighted fusion with w == 0 equals sum fusion componentwise
    w0_diff = 0.0
    for _ in range(200):
        t = rng.standard_normal(16)
        v = rng.standard_normal(16)
        t_hat = t / np.linalg.norm(t)
        v -= (v @ t_hat) * t_hat
        if np.linalg.norm(v) < 1e-9:
            continue
        w0_diff = max(
            w0_diff,
            float(np.max(np.abs(
                fusion.weighted_fusion_query(t, v) - fusion.sum_fusion_query(t, v)
            ))),
        )
    ok &= w0_diff < 1e-9

    # weighted fusion with w == 1 ranks identically to text-only
    w1_ok = True
    for _ in range(50):
        t = rng.standard_normal(16)
        q = fusion.weighted_fusion_query(t, 2.5 * t)
        cands = {f"i{j:03d}": rng.standard_normal(16) for j in range(40)}
        got = fusion.RankedList.from_scores(
            {i: fusion.single_score(q, c) for i, c in cands.items()}
        ).ids()
        want = fusion.RankedList.from_scores(
            {i: fusion.single_score(t, c) for i, c in cands.items()}
        ).ids()
        w1_ok &= got == want
    ok &= w1_ok

    elapsed = time.time() - t0
    ok &= elapsed < 5.0
    announce(
        "fusion identity suite",
        ok,
        f"score diff {max_diff:.2e} (<1e-6), w0 diff {w0_diff:.2e} (<1e-9), "
        f"rankings equal, {elapsed:.1f}s (<5s)",
    )
    assert ok


def test_index_exactness_and_recall_monotonicity(announce):
    """Full probe equals exhaustive search; recall grows with nprobe."""
    t0 = time.time()
    rng = np.random.default_rng(20240002)
    n_images, per_image, dim = 2500, 5, 32
    records = []
    vecs = rng.standard_normal((n_images * per_image, dim)).astype(np.float32)
    pos = 0
    for i in range(n_images):
        for p in range(per_image):
            records.append((PatchKey(f"img{i:05d}", 1 if p == 0 else 3, p % 3, p // 3), vecs[pos]))
            pos += 1
    assert len(records) >= 10_000
    index = build_index(records, seed=7)

    queries = rng.standard_normal((100, dim))
    exact_results = [search_exact(index, q, k=10) for q in queries]
    exact_ok = all(
        search(index, q, k=10, nprobe=index.num_clusters).ranked.items
        == exact.ranked.items
        for q, exact in zip(queries, exact_results)
    )

    probes = [1, 2, 4, 8, 16, 32, index.num_clusters]
    recalls = []
    exact_sets = [set(r.ranked.ids()) for r in exact_results]
    for p in probes:
        hits = sum(
            len(set(search(index, q, k=10, nprobe=p).ranked.ids()) & es)
            for q, es in zip(queries, exact_sets)
        )
        recalls.append(hits / (10 * len(queries)))
    monotone = all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))
    full_recall = recalls[-1] == pytest.approx(1.0)

    elapsed = time.time() - t0
    ok = exact_ok and monotone and full_recall and elapsed < 30.0
    announce(
        "index exactness + recall monotonicity",
        ok,
        f"{len(records)} records, 100 queries identical at full probe; "
        f"recall@10 over nprobe {probes} = {[round(r, 3) for r in recalls]}; "
        f"{elapsed:.1f}s (<30s)",
    )
    assert ok


def test_metric_oracle(announce):
    """AP implementation vs an independently written brute-force AP."""
    rng = np.random.default_rng(20240003)
    max_diff = 0.0
    for _ in range(200):
        ids = [f"i{j:02d}" for j in rng.permutation(50)]
        n_pos = int(rng.integers(1, 40))
        positives = {f"i{j:02d}" for j in rng.choice(50, size=n_pos, replace=False)}
        k = int(rng.integers(1, 60))
        diff = abs(ap_at_k(ids, positives, k) - brute_force_ap(ids, positives, k))
        max_diff = max(max_diff, diff)
    ok = max_diff < 1e-12
    announce("metric oracle", ok, f"200 random 50-item rankings, max |diff| = {max_diff:.2e} (<1e-12)")
    assert ok


def test_greedy_correctness(announce):
    """Constructed instance equals exhaustive subset search; first pair is
    single-pair optimal on every synthetic selection run."""
    t0 = time.time()
    ds, bundle, index, positives = two_mode_instance()
    pool = build_candidate_pool(ds, bundle, "c", sorted(ds.images))
    config = SelectionConfig(k=12, max_pairs=2)
    result = greedy_select(pool, index, positives, config)

    pairs = candidate_pairs(pool)
    cached = [score_pair(p, index, 12) for p in pairs]

    def subset_score(subset):
        merged = fusion.merge_results([cached[i] for i in subset], "max", 12)
        return auc_of_results(merged, positives, 12)

    exhaustive_best = max(
        subset_score(s)
        for r in (1, 2)
        for s in itertools.combinations(range(len(pairs)), r)
    )
    greedy_score = result.auc_trace[-1]
    instance_ok = abs(greedy_score - exhaustive_best) < 1e-12

    # rescan check on synthetic selection runs
    rescan_ok = True
    ds2, bundle2, _ = synth_generate(SynthConfig(n_classes=3, images_per_class=10, dim=32, seed=13))
    index2 = build_index(list(bundle2.patch_records()), seed=1)
    for cid in ds2.class_ids():
        pool2 = build_candidate_pool(ds2, bundle2, cid, ds2.image_ids())
        pos2 = ds2.images_with_class(cid)
        sel = greedy_select(pool2, index2, pos2, SelectionConfig(k=30))
        best_single = max(
            auc_of_results(score_pair(p, index2, 30), pos2, 30)
            for p in candidate_pairs(pool2)
        )
        rescan_ok &= abs(sel.auc_trace[0] - best_single) < 1e-12

    elapsed = time.time() - t0
    ok = instance_ok and rescan_ok and elapsed < 10.0
    announce(
        "greedy correctness",
        ok,
        f"constructed instance: greedy {greedy_score:.6f} == exhaustive {exhaustive_best:.6f}; "
        f"first-pair optimality on 3 synthetic classes; {elapsed:.1f}s (<10s)",
    )
    assert ok


@pytest.fixture(scope="module")
def desk_scale_world():
    return synth_generate(SynthConfig(n_classes=4, images_per_class=50, dim=64, noise_sigma=0.1, seed=0))


def test_desk_scale_method_ordering(announce, desk_scale_world):
    """Seeded synthetic world: greedy > texts > random pairs > random bboxes
    in at least 4 of 5 folds per class; greedy beats random pairs by >= 0.2 mAP."""
    t0 = time.time()
    ds, bundle, _ = desk_scale_world
    config = EvalConfig(k=1000, nprobe=300, n_folds=5, seed=0)
    outcomes = compare_methods(
        ds, bundle, config,
        methods=("greedy_pairs", "original_texts", "random_pairs", "random_bboxes"),
    )
    folds_ok = {}
    for cid in ds.class_ids():
        n = 0
        for fold in range(5):
            aps = [
                outcomes[m].fold_results[(fold, cid)].ap
                for m in ("greedy_pairs", "original_texts", "random_pairs", "random_bboxes")
            ]
            if all(a is not None for a in aps) and all(x > y for x, y in zip(aps, aps[1:])):
                n += 1
        folds_ok[cid] = n
    maps = {m: oc.report.map_score for m, oc in outcomes.items()}
    gap = maps["greedy_pairs"] - maps["random_pairs"]
    elapsed = time.time() - t0
    ok = all(v >= 4 for v in folds_ok.values()) and gap >= 0.2 and elapsed < 120.0
    announce(
        "desk-scale method ordering",
        ok,
        f"chain holds in {folds_ok} of 5 folds (need >=4); "
        f"mAPs {({m: round(v, 3) for m, v in maps.items()})}; "
        f"greedy - random_pairs = {gap:.3f} (>=0.2); {elapsed:.0f}s (<120s)",
    )
    assert ok


def test_modality_masking_direction(announce):
    """Mode-B world (clean crops, ambiguous text): full pairs >= bbox-only
    >= text-only mAP."""
    ds, bundle, _ = synth_generate(mode_b_config())
    config = EvalConfig(k=1000, nprobe=300, n_folds=5, seed=0)
    outcomes = compare_methods(ds, bundle, config, methods=("greedy_pairs",))
    greedy = outcomes["greedy_pairs"]

    # re-evaluate the selected pairs with one modality masked
    from instructmine.dataset import split_folds
    from instructmine.evaluate import aggregate_folds, evaluate_method
    from instructmine.index import build_index as bi

    split = split_folds(ds, config.n_folds, config.seed)
    maps = {}
    for mask in (None, "texts", "bboxes"):
        per_fold = []
        for fold in range(config.n_folds):
            _, test_ids = split.fold_split(fold)
            test_index = bi(
                bundle.patch_records(test_ids), seed=0
            )
            queries_per_class = {}
            for cid in split.class_ids():
                artifact = greedy.artifacts.get((fold, cid))
                if artifact is None:
                    continue
                queries = [p.as_query() for p in artifact.pairs]
                if mask == "texts":
                    queries = [q.texts_only() for q in queries]
                elif mask == "bboxes":
                    queries = [q.bboxes_only() for q in queries]
                queries_per_class[cid] = queries
            per_fold.append(
                evaluate_method(queries_per_class, test_index, split, k=config.k, nprobe=config.nprobe)
            )
        report = aggregate_folds(split, per_fold, config, f"mask={mask}")
        maps[mask] = report.map_score
    ok = maps[None] >= maps["bboxes"] >= maps["texts"]
    announce(
        "modality masking direction (mode B)",
        ok,
        f"full {maps[None]:.3f} >= bbox-only {maps['bboxes']:.3f} >= text-only {maps['texts']:.3f}",
    )
    assert ok


def test_pipeline_determinism(announce, tmp_path):
    """synth-gen -> build-index -> select-pairs -> evaluate twice with one
    seed produces byte-identical JSON outputs."""
    digests = []
    for run in ("r1", "r2"):
        base = tmp_path / run
        world = base / "world"
        assert cli_main([
            "synth-gen", "--out-dir", str(world),
            "--n-classes", "3", "--images-per-class", "8", "--dim", "32", "--seed", "17",
        ]) == 0
        assert cli_main([
            "build-index",
            "--annotations", str(world / "annotations.json"),
            "--embeddings", str(world / "embeddings.bin"),
            "--out", str(base / "patch.idx"), "--seed", "17",
        ]) == 0
        assert cli_main([
            "select-pairs",
            "--annotations", str(world / "annotations.json"),
            "--embeddings", str(world / "embeddings.bin"),
            "--out-dir", str(base / "run"),
            "--n-folds", "3", "--seed", "17", "--k", "50", "--jobs", "2",
        ]) == 0
        assert cli_main([
            "evaluate",
            "--annotations", str(world / "annotations.json"),
            "--embeddings", str(world / "embeddings.bin"),
            "--run-dir", str(base / "run"),
            "--out-dir", str(base / "report"),
        ]) == 0
        blobs = [(base / "report" / "report.json").read_bytes()]
        blobs.append((base / "patch.idx").read_bytes())
        for f in range(3):
            blobs.append((base / "run" / f"pairs_fold{f}.json").read_bytes())
        digests.append(blobs)
    ok = digests[0] == digests[1]
    announce(
        "pipeline determinism",
        ok,
        "two seeded runs produced byte-identical index, instruction files and reports"
        if ok else "outputs differ between identical runs",
    )
    assert ok


def test_throughput_benchmark(announce):
    """Single query against a 165 x 5000-record index; 50 ms target is
    recorded, not gated."""
    rng = np.random.default_rng(20240008)
    n_images, dim = 5000, 64
    vecs = rng.standard_normal((n_images * 165, dim)).astype(np.float32)
    records = []
    pos = 0
    for i in range(n_images):
        image_id = f"img{i:05d}"
        for g in (1, 3, 5, 7, 9):
            for r in range(g):
                for c in range(g):
                    records.append((PatchKey(image_id, g, r, c), vecs[pos]))
                    pos += 1
    t0 = time.time()
    # 256 clusters keeps the k-means build tractable; the probed fraction
    # matches nprobe=300 under the sqrt(N)-clusters default (300/909)
    index = build_index(records, num_clusters=256, seed=0)
    build_s = time.time() - t0
    nprobe = max(1, round(256 * 300 / 909))
    queries = rng.standard_normal((20, dim))
    search(index, queries[0], k=1000, nprobe=nprobe)  # warm-up
    times = []
    for q in queries:
        t1 = time.perf_counter()
        search(index, q, k=1000, nprobe=nprobe)
        times.append(time.perf_counter() - t1)
    median_ms = float(np.median(times) * 1000)
    within_target = median_ms < 50.0
    announce(
        "throughput benchmark (non-gating)",
        True,
        f"825000 records, build {build_s:.1f}s, median query {median_ms:.1f} ms "
        f"at nprobe={nprobe} (~nprobe-300-equivalent fraction); 50 ms target "
        f"{'met' if within_target else 'NOT met'} - recorded, not gated",
    )
    assert median_ms > 0