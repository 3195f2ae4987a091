"""Query construction and execution under the supported fusion policies.

A :class:`Query` carries an optional text vector and an optional visual
vector plus provenance (word, bbox). Early-fusion policies collapse the two
vectors into one before the index is touched; late-fusion policies run one
search per modality and combine the ranked lists. A query with a single
modality always degrades to the plain single-modality search, whatever the
configured policy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import fusion
from .errors import InvalidConfigError
from .fusion import RankedList
from .index import VectorIndex, search

EARLY_POLICIES = ("sum", "weighted")
LATE_POLICIES = ("rank", "naive")
SINGLE_POLICIES = ("single_text", "single_visual")
ALL_POLICIES = SINGLE_POLICIES + EARLY_POLICIES + LATE_POLICIES

MERGE_MODES = ("max", "avg")


@dataclass(frozen=True)
class Query:
    """One retrieval query: text and/or visual embedding plus provenance."""

    text: np.ndarray | None = None
    visual: np.ndarray | None = None
    word: str | None = None
    prompt: str | None = None
    image_id: str | None = None
    bbox_id: str | None = None
    bbox_xywh: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.text is None and self.visual is None:
            raise InvalidConfigError("query needs at least one modality")

    def texts_only(self) -> "Query":
        if self.text is None:
            raise InvalidConfigError("cannot mask the only modality of a visual query")
        return replace(self, visual=None)

    def bboxes_only(self) -> "Query":
        if self.visual is None:
            raise InvalidConfigError("cannot mask the only modality of a text query")
        return replace(self, text=None)


def fused_query_vector(q: Query, policy: str) -> np.ndarray:
    """The single query vector an early-fusion policy searches with."""
    if q.text is None:
        return np.asarray(q.visual, dtype=np.float64)
    if q.visual is None:
        return np.asarray(q.text, dtype=np.float64)
    if policy == "sum":
        return fusion.sum_fusion_query(q.text, q.visual)
    if policy == "weighted":
        return fusion.weighted_fusion_query(q.text, q.visual)
    if policy == "single_text":
        return np.asarray(q.text, dtype=np.float64)
    if policy == "single_visual":
        return np.asarray(q.visual, dtype=np.float64)
    raise InvalidConfigError(f"{policy!r} does not produce a fused vector")


def run_query(
    index: VectorIndex, q: Query, policy: str, k: int, nprobe: int
) -> RankedList:
    """Execute one query against the index under the given fusion policy."""
    if policy not in ALL_POLICIES:
        raise InvalidConfigError(f"unknown fusion policy {policy!r}")
    nprobe = min(nprobe, index.num_clusters)
    if q.text is None or q.visual is None or policy in EARLY_POLICIES + SINGLE_POLICIES:
        vec = fused_query_vector(q, policy)
        return search(index, vec, k, nprobe).ranked
    list_t = search(index, q.text, k, nprobe).ranked
    list_v = search(index, q.visual, k, nprobe).ranked
    if policy == "rank":
        return fusion.rank_fusion_merge(list_t, list_v, k)
    return fusion.naive_interleave(list_t, list_v, k)


def run_query_set(
    index: VectorIndex,
    queries: Sequence[Query],
    policy: str,
    merge_mode: str,
    k: int,
    nprobe: int,
) -> RankedList:
    """Run several queries of one method and merge their unique results."""
    if merge_mode not in MERGE_MODES:
        raise InvalidConfigError(f"unknown merge mode {merge_mode!r}")
    lists = [run_query(index, q, policy, k, nprobe) for q in queries]
    return fusion.merge_results(lists, merge_mode, k)
