"""Session-based nearest neighbors (SKNN, V_SKNN) and the popularity baseline."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Session
from .ranking import NotFittedError, RankedList, top_k

VARIANTS = ("sknn", "vsknn")


@dataclass(frozen=True)
class PopularityTable:
    counts: np.ndarray
    total_interactions: int

    @classmethod
    def from_sessions(cls, sessions: Sequence[Session], n_items: int | None = None) -> "PopularityTable":
        if n_items is None:
            n_items = 1 + max((max(s.items) for s in sessions), default=-1)
        counts = np.zeros(n_items, dtype=np.int64)
        for s in sessions:
            np.add.at(counts, np.asarray(s.items, dtype=np.int64), 1)
        return cls(counts, int(counts.sum()))

    @property
    def n_items(self) -> int:
        return len(self.counts)

    def top(self, k: int) -> RankedList:
        """Most frequent items; ties go to the lower index."""
        return top_k(self.counts.astype(np.float64), k)


class MostPopular:
    """Recommends the globally most frequent train items to every prompt."""

    def __init__(self, n_items: int | None = None):
        self.n_items = n_items
        self.popularity: PopularityTable | None = None

    def fit(self, train: Sequence[Session]) -> "MostPopular":
        if not train:
            raise ValueError("empty train set")
        self.popularity = PopularityTable.from_sessions(train, self.n_items)
        self._cache: dict[int, RankedList] = {}
        return self

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList:
        if self.popularity is None:
            raise NotFittedError("MostPopular must be fitted first")
        if k not in self._cache:
            self._cache[k] = self.popularity.top(k)
        return self._cache[k]


def linear_decay_weights(prompt: Sequence[int]) -> dict[int, float]:
    """Weight of each distinct prompt item: ``j / sum(1..n)`` at its latest position ``j``."""
    n = len(prompt)
    denom = n * (n + 1) / 2
    weights: dict[int, float] = {}
    for j, item in enumerate(prompt, start=1):
        weights.pop(item, None)
        weights[item] = j / denom
    return weights


class SessionKNN:
    """Session-based k-nearest-neighbors recommender.

    Candidate neighbors are train sessions sharing at least one item with the
    prompt, limited to the ``sample_size`` most recent. ``sknn`` scores a
    neighbor by the binary cosine of the two item sets. ``vsknn`` sums the
    linear-decay weights of the shared prompt items and divides by the L2
    norm of the prompt weights times ``sqrt(|neighbor items|)``.

    Each candidate item receives the summed similarity of the top
    ``m_neighbors`` neighbors that contain it. Prompt items are never
    recommended. Neighbor ties go to the more recent session; item ties go
    to the more popular item, then the lower index.
    """

    def __init__(self, m_neighbors: int = 100, sample_size: int | None = 1000, variant: str = "vsknn",
                 n_items: int | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if m_neighbors < 1:
            raise ValueError("m_neighbors must be >= 1")
        self.m_neighbors = m_neighbors
        self.sample_size = sample_size
        self.variant = variant
        self.n_items = n_items
        self._fitted = False

    def fit(self, train: Sequence[Session]) -> "SessionKNN":
        if not train:
            raise ValueError("empty train set")
        # recency rank 0 = oldest
        ordered = sorted(train, key=lambda s: (s.start_time, s.id))
        self.session_ids = [s.id for s in ordered]
        self.session_items = [tuple(s.items) for s in ordered]
        self.session_sets = [frozenset(s.items) for s in ordered]
        postings: dict[int, list[int]] = defaultdict(list)
        for rank, items in enumerate(self.session_sets):
            for item in sorted(items):
                postings[item].append(rank)
        self.postings = {item: tuple(reversed(ranks)) for item, ranks in postings.items()}
        self.popularity = PopularityTable.from_sessions(train, self.n_items)
        self._fitted = True
        return self

    def posting(self, item: int) -> tuple[int, ...]:
        """Recency ranks of train sessions containing ``item``, newest first."""
        return self.postings.get(item, ())

    def similarity(self, prompt: Sequence[int], rank: int) -> float:
        neighbor = self.session_sets[rank]
        if self.variant == "sknn":
            distinct = set(prompt)
            return len(distinct & neighbor) / math.sqrt(len(distinct) * len(neighbor))
        weights = linear_decay_weights(prompt)
        norm = math.sqrt(sum(w * w for w in weights.values()))
        shared = 0.0
        for item, w in weights.items():
            if item in neighbor:
                shared += w
        return shared / (norm * math.sqrt(len(neighbor)))

    def neighbors(self, prompt: Sequence[int]) -> list[tuple[int, float]]:
        """Top neighbors as ``(recency rank, similarity)``."""
        if not self._fitted:
            raise NotFittedError("SessionKNN must be fitted first")
        candidates: set[int] = set()
        for item in set(prompt):
            candidates.update(self.posting(item))
        ranked = sorted(candidates, reverse=True)
        if self.sample_size is not None:
            ranked = ranked[: self.sample_size]
        scored = [(rank, self.similarity(prompt, rank)) for rank in ranked]
        scored.sort(key=lambda rs: (-rs[1], -rs[0]))
        return scored[: self.m_neighbors]

    def item_scores(self, prompt: Sequence[int]) -> dict[int, float]:
        scores: dict[int, float] = {}
        for rank, sim in self.neighbors(prompt):
            for item in sorted(self.session_sets[rank]):
                scores[item] = scores.get(item, 0.0) + sim
        return scores

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList:
        if len(prompt) == 0:
            raise ValueError("empty prompt")
        dense = np.full(self.popularity.n_items, -np.inf)
        for item, score in self.item_scores(prompt).items():
            dense[item] = score
        return top_k(dense, k, exclude=sorted(set(prompt)), tiebreak=self.popularity.counts)
