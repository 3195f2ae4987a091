"""Similarity scoring and query/result fusion.

All functions here are pure: inputs are never mutated, outputs are freshly
allocated, and there is no hidden state, so concurrent use needs no
coordination. Vectors may arrive as float32 storage (the on-disk width);
every computation runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateQueryError,
    DimensionMismatchError,
    EmptyGroupError,
    InvalidRankError,
    ZeroVectorError,
)

# Norms below this are treated as zero: well below any real embedding norm,
# above denormal noise.
ZERO_NORM_THRESHOLD = 1e-12


class ScoredItem(NamedTuple):
    item_id: str
    score: float


@dataclass(frozen=True)
class RankedList:
    """Retrieval results sorted by descending score, ties by ascending id."""

    items: tuple[ScoredItem, ...]

    @classmethod
    def from_scores(
        cls,
        scores: Mapping[str, float] | Iterable[tuple[str, float]],
        k: int | None = None,
    ) -> "RankedList":
        """Sort (id, score) pairs into a valid ranked list, truncated to k."""
        pairs = scores.items() if isinstance(scores, Mapping) else scores
        ordered = sorted(pairs, key=lambda p: (-p[1], p[0]))
        if k is not None:
            ordered = ordered[:k]
        return cls(tuple(ScoredItem(i, float(s)) for i, s in ordered))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def ids(self) -> list[str]:
        return [it.item_id for it in self.items]

    def ranks(self) -> dict[str, int]:
        """Map item_id to its 1-based rank."""
        return {it.item_id: r for r, it in enumerate(self.items, start=1)}

    def validate(self) -> None:
        seen: set[str] = set()
        prev = np.inf
        for it in self.items:
            if not np.isfinite(it.score):
                raise ValueError(f"non-finite score for {it.item_id!r}")
            if it.score > prev:
                raise ValueError("scores must be non-increasing")
            if it.item_id in seen:
                raise ValueError(f"duplicate item_id {it.item_id!r}")
            seen.add(it.item_id)
            prev = it.score


def _as_vector(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("vector has non-finite entries")
    return a


def _same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] != b.shape[0]:
        raise DimensionMismatchError(
            f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}"
        )


def normalize(v) -> np.ndarray:
    """Scale v to unit L2 norm. Idempotent; raises ZeroVectorError on ~0 input."""
    a = _as_vector(v)
    n = float(np.linalg.norm(a))
    if n <= ZERO_NORM_THRESHOLD:
        raise ZeroVectorError(f"cannot normalize vector with norm {n!r}")
    return a / n


def single_score(q, x) -> float:
    """Cosine similarity of a single-modality query against an example."""
    qa, xa = _as_vector(q), _as_vector(x)
    _same_dim(qa, xa)
    s = float(np.dot(normalize(qa), normalize(xa)))
    # guard against float drift outside the mathematical range
    return min(1.0, max(-1.0, s))


def sum_fusion_query(q_t, q_v) -> np.ndarray:
    """Early-fusion sum query: the sum of the two unit queries.

    Deliberately not re-normalized: cos(q, x) * ||q|| must equal
    cos(q_t, x) + cos(q_v, x) exactly (up to float tolerance).
    """
    t, v = _as_vector(q_t), _as_vector(q_v)
    _same_dim(t, v)
    return normalize(v) + normalize(t)


def weighted_fusion_query(q_t, q_v) -> np.ndarray:
    """Early-fusion weighted query: (1-w)*v_hat + (1+w)*t_hat, w = cos(t, v).

    At w=1 this is 2*t_hat (text-only ranking); at w=0 it coincides with
    sum_fusion_query. The zero-norm guard is defensive: the formula cannot
    reach zero for valid inputs (antipodal queries give 2*v_hat).
    """
    t, v = _as_vector(q_t), _as_vector(q_v)
    _same_dim(t, v)
    t_hat, v_hat = normalize(t), normalize(v)
    w = min(1.0, max(-1.0, float(np.dot(t_hat, v_hat))))
    q = (1.0 - w) * v_hat + (1.0 + w) * t_hat
    if float(np.linalg.norm(q)) <= ZERO_NORM_THRESHOLD:
        raise DegenerateQueryError(f"weighted query collapsed to zero (w={w})")
    return q


def rank_fusion_score(rank_v: int, rank_t: int) -> float:
    """Inverse harmonic rank score 1/rank_v + 1/rank_t for one item."""
    for r in (rank_v, rank_t):
        if int(r) != r or r < 1:
            raise InvalidRankError(f"rank must be a positive integer, got {r!r}")
    return 1.0 / rank_v + 1.0 / rank_t


def rank_fusion_merge(list_t: RankedList, list_v: RankedList, k: int) -> RankedList:
    """Combine two ranked lists by summed inverse rank.

    An item absent from one list contributes 0 for that list: absence means
    it was not retrieved, so it has no rank there.
    """
    ranks_t, ranks_v = list_t.ranks(), list_v.ranks()
    fused: dict[str, float] = {}
    for item_id in set(ranks_t) | set(ranks_v):
        s = 0.0
        if item_id in ranks_t:
            s += 1.0 / ranks_t[item_id]
        if item_id in ranks_v:
            s += 1.0 / ranks_v[item_id]
        fused[item_id] = s
    return RankedList.from_scores(fused, k)


def naive_interleave(list_t: RankedList, list_v: RankedList, k: int) -> RankedList:
    """Alternate items from the text and visual lists (text first).

    Items already taken are skipped. Output scores are synthetic ranks
    (k, k-1, ...) because raw scores from the two lists are incomparable.
    """
    taken: list[str] = []
    seen: set[str] = set()
    sources = (list_t.ids(), list_v.ids())
    cursors = [0, 0]
    turn = 0
    while len(taken) < k:
        progressed = False
        for offset in range(2):
            side = (turn + offset) % 2
            ids = sources[side]
            c = cursors[side]
            while c < len(ids) and ids[c] in seen:
                c += 1
            cursors[side] = c
            if c < len(ids):
                taken.append(ids[c])
                seen.add(ids[c])
                cursors[side] = c + 1
                turn = (side + 1) % 2
                progressed = True
                break
        if not progressed:
            break
    items = tuple(
        ScoredItem(item_id, float(k - pos)) for pos, item_id in enumerate(taken)
    )
    return RankedList(items)


def merge_results(lists: Sequence[RankedList], mode: str, k: int) -> RankedList:
    """Fuse results of multiple queries of the same kind.

    Duplicate items are combined by max or by mean over the lists that
    contain the item; the union is re-sorted and truncated to k.
    """
    if mode not in ("max", "avg"):
        raise ValueError(f"merge mode must be 'max' or 'avg', got {mode!r}")
    acc: dict[str, list[float]] = {}
    for rl in lists:
        for it in rl:
            acc.setdefault(it.item_id, []).append(it.score)
    if mode == "max":
        fused = {i: max(ss) for i, ss in acc.items()}
    else:
        fused = {i: float(np.mean(ss)) for i, ss in acc.items()}
    return RankedList.from_scores(fused, k)


def patch_fusion(scores_by_image: Mapping[str, Sequence[float]]) -> dict[str, float]:
    """Reduce per-patch similarity scores to one score per image (max)."""
    out: dict[str, float] = {}
    for image_id, scores in scores_by_image.items():
        scores = list(scores)
        if not scores:
            raise EmptyGroupError(f"image {image_id!r} has no patch scores")
        out[image_id] = float(max(scores))
    return out
