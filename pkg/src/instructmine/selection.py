"""Greedy selection of multimodal instruction pairs.

For one class, every candidate (word, bbox-crop) pair is scored by the
average precision of the image ranking it retrieves from the training
index. The best pair seeds the instruction set; the set then grows by
repeatedly trying every remaining pair, combining the member pairs' cached
result lists by max, and accepting the pair that most improves the set-level
AP. Growth stops when no pair gives a strict improvement or the size cap is
reached. Strictness guarantees termination on plateaus.

Each pair's ranked list is computed once and cached; the growth phase
recombines cached lists instead of re-searching, which is equivalent because
merging operates on the stored scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .dataset import CandidatePool
from .errors import EmptyPoolError, NoPositivesError
from .fusion import RankedList, merge_results
from .index import VectorIndex
from .metrics import ap_at_k
from .queries import Query, run_query


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 1000
    max_pairs: int = 4
    fusion_policy: str = "sum"
    merge_mode: str = "max"
    nprobe: int = 300

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "max_pairs": self.max_pairs,
            "fusion_policy": self.fusion_policy,
            "merge_mode": self.merge_mode,
            "nprobe": self.nprobe,
        }


@dataclass(frozen=True)
class MultimodalPair:
    """One candidate (text, image-crop) instruction pair."""

    word: str
    prompt: str
    text_embedding: np.ndarray
    image_id: str
    bbox_id: str
    visual_embedding: np.ndarray

    def as_query(self) -> Query:
        return Query(
            text=self.text_embedding,
            visual=self.visual_embedding,
            word=self.word,
            prompt=self.prompt,
            image_id=self.image_id,
            bbox_id=self.bbox_id,
        )

    def key(self) -> tuple[str, str]:
        """Deterministic tie-break identity: lexicographic (word, bbox_id)."""
        return (self.word, self.bbox_id)


@dataclass
class InstructionSet:
    """Selected pairs for one class, in selection order, with the AP trace."""

    class_id: str
    pairs: list[MultimodalPair]
    auc_trace: list[float]
    config: SelectionConfig

    def validate(self) -> None:
        if not (1 <= len(self.pairs) <= self.config.max_pairs):
            raise ValueError("pair count outside [1, max_pairs]")
        if len(self.auc_trace) != len(self.pairs):
            raise ValueError("trace length must match pair count")
        for a, b in zip(self.auc_trace, self.auc_trace[1:]):
            if not b > a:
                raise ValueError("AP trace must be strictly increasing")


def candidate_pairs(pool: CandidatePool) -> list[MultimodalPair]:
    """The full |V_c| x |L_c| cross product, in (word, bbox_id) order."""
    pairs = [
        MultimodalPair(
            word=word,
            prompt=pool.prompt_for(word),
            text_embedding=text_vec,
            image_id=entry.image_id,
            bbox_id=entry.bbox_id,
            visual_embedding=entry.vector,
        )
        for word, text_vec in pool.words
        for entry in pool.visuals
    ]
    pairs.sort(key=lambda p: p.key())
    return pairs


def score_pair(
    pair: MultimodalPair,
    index: VectorIndex,
    k: int,
    nprobe: int = 300,
    fusion_policy: str = "sum",
) -> RankedList:
    """Top-k image ranking retrieved by one fused candidate pair."""
    return run_query(index, pair.as_query(), fusion_policy, k, nprobe)


def auc_of_results(ranked: RankedList, positives: Iterable[str], k: int) -> float:
    """Area under the precision-recall curve of a top-k ranking (AP@k)."""
    return ap_at_k(ranked, positives, k)


def greedy_select(
    pool: CandidatePool,
    index: VectorIndex,
    positives: set[str],
    config: SelectionConfig = SelectionConfig(),
) -> InstructionSet:
    """Grow the instruction set for one class while its training AP improves."""
    if not positives:
        raise NoPositivesError(f"class {pool.class_id!r} has no positive train images")
    pairs = candidate_pairs(pool)
    if not pairs:
        raise EmptyPoolError(f"class {pool.class_id!r} has an empty candidate pool")

    cached: list[RankedList] = [
        score_pair(p, index, config.k, config.nprobe, config.fusion_policy)
        for p in pairs
    ]

    def set_score(member_lists: Sequence[RankedList]) -> float:
        merged = merge_results(member_lists, config.merge_mode, config.k)
        return auc_of_results(merged, positives, config.k)

    # pairs are in (word, bbox_id) order, so "first index" resolves ties
    scores = [set_score([rl]) for rl in cached]
    best_score = max(scores)
    best_i = min(i for i, s in enumerate(scores) if s == best_score)

    selected = [best_i]
    trace = [best_score]
    while len(selected) < config.max_pairs:
        member_lists = [cached[j] for j in selected]
        best_new, best_gain_i = best_score, None
        for i in range(len(pairs)):
            if i in selected:
                continue
            s = set_score(member_lists + [cached[i]])
            if s > best_new:
                best_new, best_gain_i = s, i
        if best_gain_i is None:
            break
        selected.append(best_gain_i)
        best_score = best_new
        trace.append(best_new)

    result = InstructionSet(
        class_id=pool.class_id,
        pairs=[pairs[i] for i in selected],
        auc_trace=trace,
        config=config,
    )
    result.validate()
    return result
