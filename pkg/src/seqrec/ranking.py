"""Ranked recommendation lists and the recommender contract."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Protocol, Sequence, runtime_checkable

import numpy as np

from .data import Session


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankedList:
    """Items in descending score order. Items are unique."""

    items: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if len(self.items) != len(self.scores):
            raise ValueError("items and scores differ in length")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return zip(self.items.tolist(), self.scores.tolist())

    def head(self, k: int) -> "RankedList":
        return RankedList(self.items[:k], self.scores[:k])

    @classmethod
    def empty(cls) -> "RankedList":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))


def top_k(scores: np.ndarray, k: int, exclude: Sequence[int] = (), tiebreak: np.ndarray | None = None) -> RankedList:
    """Top-``k`` indices of ``scores``; ties go to ``tiebreak`` (descending), then lower index.

    Entries set to ``-inf`` and indices in ``exclude`` never appear.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if len(exclude):
        scores = scores.copy()
        ex = np.asarray(list(exclude), dtype=np.int64)
        scores[ex[(ex >= 0) & (ex < len(scores))]] = -np.inf
    finite = np.flatnonzero(np.isfinite(scores))
    if len(finite) > k:
        # everything tied with the k-th best stays in the pool for the exact sort
        kth = np.partition(scores[finite], len(finite) - k)[len(finite) - k]
        finite = finite[scores[finite] >= kth]
    # np.lexsort sorts by the last key first
    if tiebreak is None:
        order = finite[np.lexsort((finite, -scores[finite]))]
    else:
        tb = np.asarray(tiebreak, dtype=np.float64)
        order = finite[np.lexsort((finite, -tb[finite], -scores[finite]))]
    order = order[:k]
    return RankedList(order.astype(np.int64), scores[order])


@runtime_checkable
class Recommender(Protocol):
    """Fit on train sessions, then recommend top-k items for a prompt."""

    def fit(self, train: Sequence[Session]) -> "Recommender": ...

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList: ...
