"""Comparison methods: original texts/pairs, random selections, mean shift.

Every baseline emits plain :class:`~instructmine.queries.Query` objects so it
flows through exactly the same evaluation path as the greedy selector; there
is no metric divergence by construction.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import AnnotatedDataset, CandidatePool, EmbeddingBundle
from .errors import MissingEmbeddingError, ParseError, PoolTooSmallError
from .queries import Query

MEAN_SHIFT_MAX_ITER = 300
MEAN_SHIFT_QUANTILE = 0.3


def original_texts(pool: CandidatePool) -> list[Query]:
    """One text-only query per word of the class; results are max-merged."""
    return [
        Query(text=vec, word=word, prompt=pool.prompt_for(word))
        for word, vec in pool.words
    ]


def random_bboxes(pool: CandidatePool, n: int, seed: int) -> list[Query]:
    """Seeded uniform sample of n visual-only queries from V_c."""
    if n > len(pool.visuals):
        raise PoolTooSmallError(
            f"requested {n} bboxes from a pool of {len(pool.visuals)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool.visuals), size=n, replace=False)
    return [
        Query(
            visual=pool.visuals[i].vector,
            image_id=pool.visuals[i].image_id,
            bbox_id=pool.visuals[i].bbox_id,
        )
        for i in idx
    ]


def random_pairs(pool: CandidatePool, n: int, seed: int) -> list[Query]:
    """The random_bboxes sample, each paired with a seeded-uniform word.

    Word and bbox are drawn independently, so mismatched (word, crop)
    combinations are expected and allowed.
    """
    if n > len(pool.visuals):
        raise PoolTooSmallError(
            f"requested {n} pairs from a pool of {len(pool.visuals)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool.visuals), size=n, replace=False)
    word_idx = rng.integers(len(pool.words), size=n)
    out = []
    for i, wi in zip(idx, word_idx):
        entry = pool.visuals[i]
        word, text_vec = pool.words[int(wi)]
        out.append(
            Query(
                text=text_vec,
                visual=entry.vector,
                word=word,
                prompt=pool.prompt_for(word),
                image_id=entry.image_id,
                bbox_id=entry.bbox_id,
            )
        )
    return out


def _flat_mean_shift(points: np.ndarray, bandwidth: float) -> list[tuple[np.ndarray, int]]:
    """Flat-kernel mean shift; returns deduplicated (mode, support) list.

    One walker starts at every point; converged walkers within
    bandwidth / 2 of an already-kept mode are merged into it. Kept modes are
    ordered by descending support, ties by walker index.
    """
    n = points.shape[0]
    stop = max(1e-3 * bandwidth, 1e-12)
    converged = np.empty_like(points)
    support = np.zeros(n, dtype=int)
    for i in range(n):
        m = points[i].copy()
        for _ in range(MEAN_SHIFT_MAX_ITER):
            within = np.linalg.norm(points - m, axis=1) <= bandwidth
            new_m = points[within].mean(axis=0)
            shift = float(np.linalg.norm(new_m - m))
            m = new_m
            if shift < stop:
                break
        converged[i] = m
        support[i] = int(np.count_nonzero(np.linalg.norm(points - m, axis=1) <= bandwidth))

    order = sorted(range(n), key=lambda i: (-support[i], i))
    kept: list[tuple[np.ndarray, int]] = []
    for i in order:
        if all(np.linalg.norm(converged[i] - mode) > bandwidth / 2.0 for mode, _ in kept):
            kept.append((converged[i], int(support[i])))
    return kept


def estimate_bandwidth(points: np.ndarray, quantile: float = MEAN_SHIFT_QUANTILE) -> float:
    """Quantile of the pairwise Euclidean distance distribution."""
    n = points.shape[0]
    if n < 2:
        return 0.0
    d2 = np.sum(points**2, axis=1)
    sq = d2[:, None] + d2[None, :] - 2.0 * (points @ points.T)
    iu = np.triu_indices(n, k=1)
    dists = np.sqrt(np.maximum(sq[iu], 0.0))
    return float(np.quantile(dists, quantile))


def mean_shift_examples(pool: CandidatePool, bandwidth: float | None = None) -> list[Query]:
    """Cluster the class's crop embeddings and keep one example per mode.

    Each mode contributes the nearest pool member, paired with the class's
    canonical word. All modes are kept; the output never exceeds |V_c|.
    """
    vectors = np.stack([e.vector.astype(np.float64) for e in pool.visuals])
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    if bandwidth is None:
        bandwidth = estimate_bandwidth(vectors)
    modes = _flat_mean_shift(vectors, bandwidth)
    canonical_word, canonical_vec = pool.words[0]
    out: list[Query] = []
    seen: set[str] = set()
    for mode, _sup in modes:
        d = np.linalg.norm(vectors - mode, axis=1)
        nearest = int(np.argmin(d))  # argmin takes the first (lowest index) on ties
        entry = pool.visuals[nearest]
        if entry.bbox_id in seen:
            continue
        seen.add(entry.bbox_id)
        out.append(
            Query(
                text=canonical_vec,
                visual=entry.vector,
                word=canonical_word,
                prompt=pool.prompt_for(canonical_word),
                image_id=entry.image_id,
                bbox_id=entry.bbox_id,
            )
        )
    return out


def load_instruction_entries(path: str | Path) -> list[dict]:
    """Normalize an instruction file into flat {class, word, image_id, ...} rows.

    Accepts both the flat original-instruction schema (a JSON list) and the
    per-fold instruction-set document this package writes.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    entries: list[dict] = []
    if isinstance(doc, list):
        rows = doc
        for row in rows:
            if not isinstance(row, dict) or "class" not in row:
                raise ParseError(f"{path}: malformed instruction row {row!r}")
            entries.append(dict(row))
    elif isinstance(doc, dict) and "classes" in doc:
        for cls in doc["classes"]:
            for pair in cls.get("pairs", []):
                row = dict(pair)
                row["class"] = cls["class_id"]
                entries.append(row)
    else:
        raise ParseError(f"{path}: not an instruction file")
    return entries


def original_pairs(
    entries: list[dict] | str | Path,
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    class_id: str,
    prompt_template: str,
) -> list[Query]:
    """Build queries verbatim from an original-instruction file for one class."""
    if not isinstance(entries, list):
        entries = load_instruction_entries(entries)
    cls = ds.classes[class_id]
    out: list[Query] = []
    for row in entries:
        if row["class"] not in (class_id, cls.name):
            continue
        word = row.get("word")
        text_vec = None
        prompt = None
        if word is not None:
            prompt = row.get("prompt") or prompt_template.format(word)
            if prompt not in bundle.texts:
                raise MissingEmbeddingError(f"no text embedding for prompt {prompt!r}")
            text_vec = bundle.texts[prompt]
        visual_vec = None
        bbox_id = row.get("bbox_id")
        image_id = row.get("image_id")
        if bbox_id is None and image_id is not None and row.get("bbox_xywh") is not None:
            bbox_id = _match_bbox(ds, image_id, row["bbox_xywh"])
        if bbox_id is not None:
            if bbox_id not in bundle.bboxes:
                raise MissingEmbeddingError(f"no bbox embedding for {bbox_id!r}")
            visual_vec = bundle.bboxes[bbox_id]
        if text_vec is None and visual_vec is None:
            raise MissingEmbeddingError(f"instruction row has no usable modality: {row!r}")
        out.append(
            Query(
                text=text_vec,
                visual=visual_vec,
                word=word,
                prompt=prompt,
                image_id=image_id,
                bbox_id=bbox_id,
            )
        )
    return out


def _match_bbox(ds: AnnotatedDataset, image_id: str, xywh) -> str:
    if image_id not in ds.images:
        raise MissingEmbeddingError(f"instruction references unknown image {image_id!r}")
    target = tuple(float(v) for v in xywh)
    for bb in ds.bboxes_by_image[image_id]:
        if bb.xywh == target:
            return bb.bbox_id
    raise MissingEmbeddingError(
        f"no bbox at {target} in image {image_id!r}"
    )
