"""Synthetic sessions with planted first-order transitions and clustered embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import make_rng
from .data import Dataset, Item, Session, temporal_split
from .embeddings import EmbeddingMatrix


@dataclass(frozen=True)
class PlantedData:
    dataset: Dataset
    embeddings: EmbeddingMatrix
    categories: np.ndarray
    transitions: np.ndarray


def make_planted_dataset(
    n_items: int = 500,
    n_sessions: int = 5000,
    n_categories: int = 25,
    n_successors: int = 3,
    p_successor: float = 0.6,
    p_category: float = 0.3,
    mean_length: float = 7.0,
    max_length: int = 20,
    embedding_dim: int = 128,
    cluster_noise: float = 0.35,
    popularity_exponent: float = 0.8,
    test_fraction: float = 0.1,
    seed: int = 0,
) -> PlantedData:
    """Sessions drawn from a Markov chain whose transitions stay mostly in-category.

    Each item has ``n_successors`` preferred successors in its own category,
    followed with total probability ``p_successor``. With ``p_category`` the
    next item is any item of the same category (popularity weighted), and
    otherwise any catalog item (popularity weighted). Embeddings are a
    category centroid plus isotropic noise, so they carry category but not
    transition information.

    Returns:
        PlantedData whose ``transitions`` is the exact ``n_items x n_items``
        transition matrix used for sampling.
    """
    rng = make_rng([seed, 7])
    categories = np.arange(n_items) % n_categories
    rng.shuffle(categories)
    popularity = 1.0 / np.arange(1, n_items + 1) ** popularity_exponent
    popularity = popularity[rng.permutation(n_items)]
    popularity /= popularity.sum()

    members = [np.flatnonzero(categories == c) for c in range(n_categories)]
    trans = np.zeros((n_items, n_items))
    for i in range(n_items):
        same = members[categories[i]]
        others = same[same != i]
        succ = rng.choice(others, size=min(n_successors, len(others)), replace=False)
        trans[i, succ] += p_successor / len(succ)
        w = popularity[same] / popularity[same].sum()
        trans[i, same] += p_category * w
        trans[i] += (1.0 - p_successor - p_category) * popularity
    trans /= trans.sum(axis=1, keepdims=True)
    cdf = np.cumsum(trans, axis=1)
    pop_cdf = np.cumsum(popularity)

    sessions = []
    t = 0
    for s in range(n_sessions):
        length = int(min(max_length, 2 + rng.geometric(1.0 / max(mean_length - 1.0, 1.0))))
        items = [int(np.searchsorted(pop_cdf, rng.random() * pop_cdf[-1], side="right"))]
        for _ in range(length - 1):
            row = cdf[items[-1]]
            items.append(int(min(np.searchsorted(row, rng.random() * row[-1], side="right"), n_items - 1)))
        t += int(rng.integers(60, 600))
        sessions.append(Session(f"s{s:06d}", tuple(items), tuple(t + 30 * j for j in range(length))))

    catalog = tuple(Item(i, f"item{i:04d}", f"category {categories[i]} product {i}") for i in range(n_items))
    dataset = temporal_split(sessions, test_fraction, catalog)

    centroids = rng.standard_normal((n_categories, embedding_dim))
    emb = centroids[categories] + cluster_noise * rng.standard_normal((n_items, embedding_dim))
    embeddings = EmbeddingMatrix(emb.astype(np.float32), tuple(it.external_id for it in catalog))
    return PlantedData(dataset, embeddings, categories, trans)
