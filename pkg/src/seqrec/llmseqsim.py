"""Recommend catalog items whose embedding is closest to an aggregated session embedding."""

from __future__ import annotations

from enum import Enum
from typing import Sequence

import numpy as np

from .data import Session
from .embeddings import EmbeddingMatrix
from .ranking import RankedList, top_k


class Aggregation(str, Enum):
    MEAN = "mean"
    LINEAR_DECAY = "linear"
    EXP_DECAY = "exp"
    LAST_ITEM = "last"


class Similarity(str, Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"
    DOT = "dot"


def position_weights(n: int, aggregation: Aggregation | str, decay_rate: float = 0.5) -> np.ndarray:
    """Normalized weights for positions ``1..n`` (the last position is the newest)."""
    aggregation = Aggregation(aggregation)
    if n < 1:
        raise ValueError("empty prompt")
    if aggregation is Aggregation.MEAN:
        w = np.ones(n)
    elif aggregation is Aggregation.LINEAR_DECAY:
        w = np.arange(1, n + 1, dtype=np.float64)
    elif aggregation is Aggregation.EXP_DECAY:
        if not (np.isfinite(decay_rate) and decay_rate > 0):
            raise ValueError("decay_rate must be finite and positive")
        w = np.exp(-decay_rate * (n - np.arange(1, n + 1)))
    else:
        w = np.zeros(n)
        w[-1] = 1.0
    return w / w.sum()


def aggregate_session(
    prompt: Sequence[int],
    embeddings: EmbeddingMatrix | np.ndarray,
    aggregation: Aggregation | str = Aggregation.MEAN,
    decay_rate: float = 0.5,
) -> np.ndarray:
    """Weighted average of the prompt items' embeddings, in float64."""
    if len(prompt) == 0:
        raise ValueError("empty prompt")
    data = embeddings.data if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings)
    rows = data[np.asarray(prompt, dtype=np.int64)].astype(np.float64)
    if Aggregation(aggregation) is Aggregation.LAST_ITEM:
        return rows[-1].copy()
    return position_weights(len(prompt), aggregation, decay_rate) @ rows


def similarity_scores(query: np.ndarray, catalog: np.ndarray, similarity: Similarity | str,
                      catalog_norms: np.ndarray | None = None) -> np.ndarray:
    """Similarity of ``query`` to every catalog row; higher is more similar.

    Euclidean similarity is the negated distance. Cosine with a zero-norm
    query falls back to the dot product.
    """
    similarity = Similarity(similarity)
    if similarity is Similarity.EUCLIDEAN:
        # explicit differences keep coincident vectors at exactly zero distance
        return -np.linalg.norm(catalog - query, axis=1)
    dots = catalog @ query
    if similarity is Similarity.DOT:
        return dots
    qn = np.linalg.norm(query)
    if qn == 0.0:
        return dots
    norms = np.linalg.norm(catalog, axis=1) if catalog_norms is None else catalog_norms
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dots / (norms * qn)
    return np.clip(np.where(norms > 0, cos, 0.0), -1.0, 1.0)


class LLMSeqSim:
    """Embedding-similarity recommender.

    The prompt's item embeddings are combined into one session vector and
    the whole catalog is scanned exactly; ties go to the lower item index.

    Args:
        embeddings: Item embedding matrix aligned with the catalog.
        aggregation: How to combine prompt embeddings.
        similarity: Cosine, negated Euclidean distance, or dot product.
        decay_rate: Rate for exponential decay weighting.
        exclude_seen: Drop prompt items from the output.
    """

    def __init__(
        self,
        embeddings: EmbeddingMatrix,
        aggregation: Aggregation | str = Aggregation.LAST_ITEM,
        similarity: Similarity | str = Similarity.COSINE,
        decay_rate: float = 0.5,
        exclude_seen: bool = False,
    ):
        self.embeddings = embeddings
        self.aggregation = Aggregation(aggregation)
        self.similarity = Similarity(similarity)
        self.decay_rate = decay_rate
        self.exclude_seen = exclude_seen
        self._catalog = embeddings.data.astype(np.float64)
        self._norms = np.linalg.norm(self._catalog, axis=1)

    def fit(self, train: Sequence[Session] = ()) -> "LLMSeqSim":
        return self

    def score(self, prompt: Sequence[int]) -> np.ndarray:
        query = aggregate_session(prompt, self._catalog, self.aggregation, self.decay_rate)
        return similarity_scores(query, self._catalog, self.similarity, self._norms)

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList:
        exclude = sorted(set(prompt)) if self.exclude_seen else ()
        return top_k(self.score(prompt), k, exclude=exclude)
