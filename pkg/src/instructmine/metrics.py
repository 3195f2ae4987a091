"""Retrieval metrics: precision/recall at k and average precision at k.

One implementation serves both the greedy selection objective and held-out
evaluation, so the training objective and the test metric are identical by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NoPositivesError
from .fusion import RankedList


@dataclass(frozen=True)
class PRCurve:
    """Precision/recall at every k from 1 to len(ks)."""

    ks: np.ndarray        # int, 1..K
    precision: np.ndarray
    recall: np.ndarray

    def validate(self) -> None:
        if not (len(self.ks) == len(self.precision) == len(self.recall)):
            raise ValueError("PR curve arrays must be parallel")
        if np.any(self.precision < 0) or np.any(self.precision > 1):
            raise ValueError("precision out of [0, 1]")
        if np.any(self.recall < 0) or np.any(self.recall > 1):
            raise ValueError("recall out of [0, 1]")
        if np.any(np.diff(self.recall) < 0):
            raise ValueError("recall must be non-decreasing in k")


def _ranked_ids(ranked: RankedList | Sequence[str]) -> list[str]:
    if isinstance(ranked, RankedList):
        return ranked.ids()
    return list(ranked)


def ap_at_k(ranked: RankedList | Sequence[str], positives: Iterable[str], k: int) -> float:
    """Average precision over the top-k ranked items.

    AP@k = sum over positive hits at rank r <= k of precision@r, divided by
    min(|positives|, k). Equals 1 exactly when the first min(|positives|, k)
    ranks are all positive.
    """
    pos = set(positives)
    if not pos:
        raise NoPositivesError("AP is undefined with no positives")
    ids = _ranked_ids(ranked)[:k]
    hits = 0
    total = 0.0
    for r, item_id in enumerate(ids, start=1):
        if item_id in pos:
            hits += 1
            total += hits / r
    return total / min(len(pos), k)


def pr_curve(ranked: RankedList | Sequence[str], positives: Iterable[str], k_max: int) -> PRCurve:
    """Precision and recall at every k in 1..k_max.

    Beyond the end of the ranked list the hit count stays constant, so the
    curve is defined on the full aligned k grid regardless of list length.
    """
    pos = set(positives)
    if not pos:
        raise NoPositivesError("PR curve is undefined with no positives")
    ids = _ranked_ids(ranked)[:k_max]
    hit_flags = np.zeros(k_max, dtype=np.float64)
    hit_flags[: len(ids)] = [1.0 if i in pos else 0.0 for i in ids]
    hits = np.cumsum(hit_flags)
    ks = np.arange(1, k_max + 1)
    return PRCurve(ks=ks, precision=hits / ks, recall=hits / len(pos))
