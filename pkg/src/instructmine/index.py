"""Clustered vector index over patch/image embeddings.

The index stores unit-normalized float32 vectors partitioned into k-means
cells (inverted lists). A query visits the ``nprobe`` nearest cells, scores
cosine similarity against every record there, reduces patch scores to one
score per image by max, and returns the top-k images. With
``nprobe == num_clusters`` the search is exact by construction.

Records are laid out contiguously by cluster so a probe is a slice, not a
gather. The index is immutable after build; concurrent reads need no
coordination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyIndexError,
    EmptyInputError,
    InvalidConfigError,
    ZeroVectorError,
)
from .fusion import ZERO_NORM_THRESHOLD, RankedList, ScoredItem
from .storage import INDEX_MAGIC, ByteReader, ByteWriter

GRID_SIZES = (1, 3, 5, 7, 9)
PATCHES_PER_IMAGE = sum(g * g for g in GRID_SIZES)  # 165
BBOX_GRID = 0  # grid_size sentinel for bbox-crop records

KMEANS_MAX_ITER = 25
KMEANS_SHIFT_TOL = 1e-4
KMEANS_SAMPLE_PER_CLUSTER = 256  # cap on training points per centroid
MAX_CLUSTERS = 4096


class PatchKey(NamedTuple):
    """Identity of one stored vector: a grid cell or a bbox crop."""

    image_id: str
    grid_size: int
    cell_row: int = 0
    cell_col: int = 0
    bbox_id: str = ""

    def is_bbox(self) -> bool:
        return self.grid_size == BBOX_GRID

    def validate(self) -> None:
        if self.grid_size == BBOX_GRID:
            if not self.bbox_id:
                raise ValueError("bbox record needs a bbox_id")
        elif self.grid_size in GRID_SIZES:
            g = self.grid_size
            if not (0 <= self.cell_row < g and 0 <= self.cell_col < g):
                raise ValueError(f"cell ({self.cell_row},{self.cell_col}) outside {g}x{g} grid")
            if self.bbox_id:
                raise ValueError("grid record must not carry a bbox_id")
        else:
            raise ValueError(f"grid_size must be one of {GRID_SIZES} or the bbox sentinel")


def default_num_clusters(n_records: int) -> int:
    """Standard IVF heuristic: ceil(sqrt(N)), clamped to [1, 4096]."""
    c = int(np.ceil(np.sqrt(max(n_records, 1))))
    return max(1, min(c, MAX_CLUSTERS, n_records))


def _kmeans(x: np.ndarray, num_clusters: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded Lloyd's with k-means++ init; returns (centroids, assignments).

    When the dataset is large, centroids are trained on a seeded subsample
    (KMEANS_SAMPLE_PER_CLUSTER points per centroid) and every record is
    assigned once at the end. Input rows must be unit vectors, which lets
    every distance be computed from dot products alone.
    """
    rng = np.random.default_rng(seed)
    n, dim = x.shape
    cap = KMEANS_SAMPLE_PER_CLUSTER * num_clusters
    if n > cap:
        train = x[np.sort(rng.choice(n, size=cap, replace=False))]
    else:
        train = x
    m = train.shape[0]

    # k-means++ seeding; unit rows make ||x - c||^2 = 2 - 2 x.c
    centroids = np.empty((num_clusters, dim), dtype=np.float64)
    first = int(rng.integers(m))
    centroids[0] = train[first]
    closest = np.maximum(2.0 - 2.0 * (train @ train[first]).astype(np.float64), 0.0)
    for c in range(1, num_clusters):
        total = float(closest.sum())
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            centroids[c:] = centroids[c - 1]
            break
        pick = int(rng.choice(m, p=closest / total))
        centroids[c] = train[pick]
        d = np.maximum(2.0 - 2.0 * (train @ train[pick]).astype(np.float64), 0.0)
        np.minimum(closest, d, out=closest)

    train64 = train.astype(np.float64)
    cent32 = centroids.astype(np.float32)
    for _ in range(KMEANS_MAX_ITER):
        labels, sims, c2 = _assign(train, cent32)
        counts = np.bincount(labels, minlength=num_clusters)
        new = np.empty_like(centroids)
        for d_i in range(dim):
            new[:, d_i] = np.bincount(labels, weights=train64[:, d_i], minlength=num_clusters)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        if not np.all(nonempty):
            # re-seed empty clusters at the points farthest from their centroid
            point_d = 1.0 + c2[labels] - 2.0 * sims[np.arange(m), labels]
            order = np.argsort(-point_d, kind="stable")
            for slot, point in zip(np.flatnonzero(~nonempty), order):
                new[slot] = train64[point]
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        cent32 = centroids.astype(np.float32)
        if shift < KMEANS_SHIFT_TOL:
            break

    return cent32, _assign(x, cent32)[0]


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest centroid per row; also returns the dot products and ||c||^2.

    ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2 and ||x||^2 is constant per row,
    so the argmin needs only x.c and ||c||^2.
    """
    sims = x @ centroids.T
    c2 = np.sum(centroids.astype(np.float64) ** 2, axis=1).astype(np.float32)
    d = -2.0 * sims
    d += c2[None, :]
    labels = np.argmin(d, axis=1).astype(np.int32)
    return labels, sims, c2


@dataclass(frozen=True)
class SearchResult:
    """Per-image ranking plus the best-scoring patch behind each image."""

    ranked: RankedList
    per_image_best_patch: dict[str, PatchKey]


@dataclass
class VectorIndex:
    """Immutable searchable store of unit vectors grouped by cluster."""

    dim: int
    records: np.ndarray                # (N, D) float32, unit rows, cluster-sorted
    keys: tuple[PatchKey, ...]         # parallel to records
    norm_cache: np.ndarray             # (N,) float32 original L2 norms
    centroids: np.ndarray              # (C, D) float32
    assignments: np.ndarray            # (N,) int32, sorted ascending
    list_offsets: np.ndarray           # (C + 1,) int64 slice bounds per cluster
    config: dict = field(default_factory=dict)

    # derived image-level views, built once in __post_init__
    image_ids: tuple[str, ...] = field(init=False, repr=False)
    _image_slots: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ids = sorted({k.image_id for k in self.keys})
        slot_of = {img: i for i, img in enumerate(ids)}
        self.image_ids = tuple(ids)
        self._image_slots = np.fromiter(
            (slot_of[k.image_id] for k in self.keys), dtype=np.int32, count=len(self.keys)
        )

    @property
    def num_records(self) -> int:
        return self.records.shape[0]

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def num_images(self) -> int:
        return len(self.image_ids)

    def check_invariants(self) -> None:
        counts = np.diff(self.list_offsets)
        if int(counts.sum()) != self.num_records:
            raise ValueError("inverted list lengths do not sum to record count")
        if np.any(np.diff(self.assignments) < 0):
            raise ValueError("records are not sorted by cluster")
        for c in range(self.num_clusters):
            lo, hi = self.list_offsets[c], self.list_offsets[c + 1]
            if not np.all(self.assignments[lo:hi] == c):
                raise ValueError(f"inverted list {c} contains foreign records")


def build_index(
    embeddings: Sequence[tuple[PatchKey, np.ndarray]] | Iterable[tuple[PatchKey, np.ndarray]],
    num_clusters: int | None = None,
    seed: int = 0,
) -> VectorIndex:
    """Cluster embeddings into an inverted-file index.

    Vectors are unit-normalized before clustering and scoring; the original
    norms are cached. Fully deterministic for a fixed seed.
    """
    pairs = list(embeddings)
    if not pairs:
        raise EmptyInputError("cannot build an index from zero embeddings")
    dim = int(np.asarray(pairs[0][1]).shape[-1])
    n = len(pairs)
    mat = np.empty((n, dim), dtype=np.float32)
    for i, (key, vec) in enumerate(pairs):
        a = np.asarray(vec, dtype=np.float32)
        if a.ndim != 1 or a.shape[0] != dim:
            raise DimensionMismatchError(
                f"record {key} has dimension {a.shape}, expected ({dim},)"
            )
        mat[i] = a
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    if np.any(norms <= ZERO_NORM_THRESHOLD):
        bad = pairs[int(np.argmin(norms))][0]
        raise ZeroVectorError(f"record {bad} has (near-)zero norm")
    unit = (mat.astype(np.float64) / norms[:, None]).astype(np.float32)

    if num_clusters is None:
        num_clusters = default_num_clusters(n)
    if not (1 <= num_clusters <= n):
        raise InvalidConfigError(
            f"num_clusters must be in [1, {n}], got {num_clusters}"
        )

    centroids, labels = _kmeans(unit, num_clusters, seed)

    order = np.lexsort((np.arange(n), labels))
    labels_sorted = labels[order]
    offsets = np.zeros(num_clusters + 1, dtype=np.int64)
    np.add.at(offsets, labels_sorted + 1, 1)
    offsets = np.cumsum(offsets)

    return VectorIndex(
        dim=dim,
        records=np.ascontiguousarray(unit[order]),
        keys=tuple(pairs[i][0] for i in order),
        norm_cache=norms[order].astype(np.float32),
        centroids=centroids,
        assignments=labels_sorted.astype(np.int32),
        list_offsets=offsets,
        config={"num_clusters": int(num_clusters), "seed": int(seed)},
    )


def _prepare_query(index: VectorIndex, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise DimensionMismatchError(
            f"query dimension {q.shape[0]} != index dimension {index.dim}"
        )
    n = float(np.linalg.norm(q))
    if n <= ZERO_NORM_THRESHOLD:
        raise ZeroVectorError("query vector has (near-)zero norm")
    return (q / n).astype(np.float32)


def _scan(index: VectorIndex, q_unit: np.ndarray, clusters: np.ndarray, k: int) -> SearchResult:
    """Score all records in the given clusters, reduce to per-image max."""
    n_img = index.num_images
    best = np.full(n_img, -np.inf, dtype=np.float32)
    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    for c in clusters:
        lo, hi = int(index.list_offsets[c]), int(index.list_offsets[c + 1])
        if lo == hi:
            continue
        scores = index.records[lo:hi] @ q_unit
        slots = index._image_slots[lo:hi]
        np.maximum.at(best, slots, scores)
        chunks.append((scores, slots, np.arange(lo, hi, dtype=np.int64)))

    touched = np.isfinite(best)
    if not chunks or not np.any(touched):
        return SearchResult(RankedList(()), {})

    # best patch per image: lowest record id among score ties
    best_rec = np.full(n_img, np.iinfo(np.int64).max, dtype=np.int64)
    for scores, slots, rec_ids in chunks:
        at_max = scores >= best[slots]
        np.minimum.at(best_rec, slots[at_max], rec_ids[at_max])

    slots_touched = np.flatnonzero(touched)
    scores_touched = best[slots_touched].astype(np.float64)
    # descending score, ties by ascending image id (slot order == id order)
    order = np.lexsort((slots_touched, -scores_touched))[:k]
    items = []
    best_patch: dict[str, PatchKey] = {}
    for idx in order:
        slot = int(slots_touched[idx])
        image_id = index.image_ids[slot]
        items.append(ScoredItem(image_id, float(scores_touched[idx])))
        best_patch[image_id] = index.keys[int(best_rec[slot])]
    return SearchResult(RankedList(tuple(items)), best_patch)


def search(index: VectorIndex, query, k: int, nprobe: int) -> SearchResult:
    """Approximate top-k image search visiting the nprobe nearest clusters."""
    if index.num_records == 0:
        raise EmptyIndexError("index has no records")
    if k < 1:
        raise InvalidConfigError(f"k must be >= 1, got {k}")
    if not (1 <= nprobe <= index.num_clusters):
        raise InvalidConfigError(
            f"nprobe must be in [1, {index.num_clusters}], got {nprobe}"
        )
    q_unit = _prepare_query(index, query)
    sims = index.centroids @ q_unit
    c2 = np.sum(index.centroids.astype(np.float64) ** 2, axis=1).astype(np.float32)
    dist = c2 - 2.0 * sims
    probe_order = np.lexsort((np.arange(index.num_clusters), dist))
    return _scan(index, q_unit, probe_order[:nprobe], k)


def search_exact(index: VectorIndex, query, k: int) -> SearchResult:
    """Exhaustive top-k image search over every record."""
    if index.num_records == 0:
        raise EmptyIndexError("index has no records")
    if k < 1:
        raise InvalidConfigError(f"k must be >= 1, got {k}")
    q_unit = _prepare_query(index, query)
    return _scan(index, q_unit, np.arange(index.num_clusters), k)


def _write_key(w: ByteWriter, key: PatchKey) -> None:
    w.write_str(key.image_id)
    w.write_u32(key.grid_size)
    w.write_u32(key.cell_row)
    w.write_u32(key.cell_col)
    w.write_str(key.bbox_id)


def _read_key(r: ByteReader) -> PatchKey:
    image_id = r.read_str()
    grid = r.read_u32()
    row = r.read_u32()
    col = r.read_u32()
    bbox_id = r.read_str()
    return PatchKey(image_id, grid, row, col, bbox_id)


def persist(index: VectorIndex, path: str | Path) -> None:
    """Write the index to disk; loading it back reproduces every search."""
    w = ByteWriter(INDEX_MAGIC)
    w.write_str(json.dumps(index.config, sort_keys=True))
    w.write_u32(index.dim)
    w.write_u64(index.num_records)
    w.write_u32(index.num_clusters)
    w.write_f32_array(index.records)
    w.write_f32_array(index.norm_cache)
    w.write_f32_array(index.centroids)
    w.write_i32_array(index.assignments)
    w.write_i32_array(index.list_offsets)
    for key in index.keys:
        _write_key(w, key)
    w.save(path)


def load(path: str | Path) -> VectorIndex:
    """Read an index written by :func:`persist`, verifying its checksum."""
    r = ByteReader(path, INDEX_MAGIC)
    config = json.loads(r.read_str())
    dim = r.read_u32()
    n = r.read_u64()
    c = r.read_u32()
    records = r.read_f32_array(n * dim).reshape(n, dim)
    norms = r.read_f32_array(n)
    centroids = r.read_f32_array(c * dim).reshape(c, dim)
    assignments = r.read_i32_array(n)
    offsets = r.read_i32_array(c + 1).astype(np.int64)
    keys = tuple(_read_key(r) for _ in range(n))
    return VectorIndex(
        dim=dim,
        records=records,
        keys=keys,
        norm_cache=norms,
        centroids=centroids,
        assignments=assignments,
        list_offsets=offsets,
        config=config,
    )
