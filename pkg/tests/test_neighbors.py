import math
import random

import numpy as np
import pytest

from seqrec.data import Session
from seqrec.neighbors import MostPopular, PopularityTable, SessionKNN, linear_decay_weights
from seqrec.ranking import NotFittedError


def corpus(seed, n_sessions=50, n_items=15):
    rng = random.Random(seed)
    out = []
    for i in range(n_sessions):
        n = rng.randint(1, 6)
        start = rng.randrange(0, 40)  # many equal start times on purpose
        out.append(Session(f"s{rng.randrange(1000):03d}-{i}", tuple(rng.randrange(n_items) for _ in range(n)),
                           tuple(start + j for j in range(n))))
    return out


def brute_force(train, prompt, k, m, variant, sample_size, n_items):
    """Score every train session directly from its item list; no index."""
    ordered = sorted(train, key=lambda s: (s.start_time, s.id))
    counts = [0] * n_items
    for s in train:
        for it in s.items:
            counts[it] += 1
    # prompt weights in prompt order of last occurrence
    n = len(prompt)
    weights = {}
    for j, it in enumerate(prompt, start=1):
        weights.pop(it, None)
        weights[it] = j / (n * (n + 1) / 2)
    norm = math.sqrt(sum(w * w for w in weights.values()))
    candidates = []
    for rank in range(len(ordered) - 1, -1, -1):  # newest first
        items = set(ordered[rank].items)
        if not items & set(prompt):
            continue
        candidates.append(rank)
    if sample_size is not None:
        candidates = candidates[:sample_size]
    scored = []
    for rank in candidates:
        items = set(ordered[rank].items)
        if variant == "sknn":
            sim = len(set(prompt) & items) / math.sqrt(len(set(prompt)) * len(items))
        else:
            shared = 0.0
            for it, w in weights.items():
                if it in items:
                    shared += w
            sim = shared / (norm * math.sqrt(len(items)))
        scored.append((rank, sim))
    scored.sort(key=lambda rs: (-rs[1], -rs[0]))
    scores = {}
    for rank, sim in scored[:m]:
        for it in sorted(set(ordered[rank].items)):
            scores[it] = scores.get(it, 0.0) + sim
    pool = [it for it in scores if it not in set(prompt)]
    pool.sort(key=lambda it: (-scores[it], -counts[it], it))
    return pool[:k], [scores[it] for it in pool[:k]]


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("variant", ["sknn", "vsknn"])
def test_matches_index_free_brute_force(seed, variant):
    train = corpus(seed)
    rng = random.Random(seed + 100)
    for m, sample in ((3, None), (100, None), (5, 10), (2, 4)):
        model = SessionKNN(m_neighbors=m, sample_size=sample, variant=variant, n_items=15).fit(train)
        for _ in range(10):
            prompt = [rng.randrange(15) for _ in range(rng.randint(1, 5))]
            got = model.recommend(prompt, 8)
            items, scores = brute_force(train, prompt, 8, m, variant, sample, 15)
            assert got.items.tolist() == items
            assert got.scores.tolist() == scores


def test_hand_enumerated_single_shared_item():
    # x=0 a=1 b=2 c=3 d=4; every neighbor shares only x and has 3 items
    train = [Session("n1", (0, 1, 2), (1, 2, 3)), Session("n2", (0, 1, 3), (4, 5, 6)),
             Session("n3", (0, 1, 4), (7, 8, 9)), Session("n4", (0, 2, 3), (10, 11, 12)),
             Session("other", (3, 5, 6), (13, 14, 15))]
    model = SessionKNN(variant="sknn", n_items=7).fit(train)
    rec = model.recommend([0], 4)
    # a in 3 neighbors, b and c in 2 (c is more popular overall), d in 1
    assert rec.items.tolist() == [1, 3, 2, 4]
    np.testing.assert_allclose(rec.scores, np.array([3, 2, 2, 1]) / math.sqrt(3))


def test_self_match_is_top_neighbor():
    train = corpus(1)
    target = train[17]
    model = SessionKNN(variant="sknn", n_items=15).fit(train)
    rank, sim = model.neighbors(list(target.items))[0]
    assert sim == pytest.approx(1.0)
    assert set(model.session_sets[rank]) == set(target.items)


def test_never_returns_prompt_items():
    train = corpus(2)
    for variant in ("sknn", "vsknn"):
        model = SessionKNN(variant=variant, n_items=15).fit(train)
        for prompt in ([1], [1, 2, 3], [4, 4, 5]):
            assert not set(model.recommend(prompt, 15).items.tolist()) & set(prompt)


def test_index_contents():
    train = [Session("a", (1, 2), (0, 1)), Session("b", (2, 3), (5, 6))]
    model = SessionKNN(n_items=5).fit(train)
    assert len(model.posting(2)) == 2
    assert model.posting(4) == () and model.popularity.counts[4] == 0


def test_index_rebuild_consistency():
    train = corpus(7, n_sessions=1000, n_items=60)
    model = SessionKNN(n_items=60).fit(train)
    ordered = sorted(train, key=lambda s: (s.start_time, s.id))
    for item in range(60):
        expected = [r for r in range(len(ordered) - 1, -1, -1) if item in ordered[r].items]
        assert list(model.posting(item)) == expected
    assert model.popularity.counts.sum() == model.popularity.total_interactions == sum(len(s) for s in train)


def test_vsknn_weights():
    w = linear_decay_weights([5, 6, 5])
    assert w == {6: 2 / 6, 5: 3 / 6}


def test_errors():
    with pytest.raises(ValueError):
        SessionKNN(variant="sf-sknn")
    with pytest.raises(ValueError):
        SessionKNN().fit([])
    with pytest.raises(NotFittedError):
        SessionKNN().neighbors([1])
    with pytest.raises(NotFittedError):
        MostPopular().recommend([1], 3)


def test_most_popular():
    train = [Session("s1", (0,) * 5 + (1,) * 3 + (2,), tuple(range(9)))]
    mp = MostPopular(4).fit(train)
    assert mp.recommend([3], 2).items.tolist() == [0, 1]
    tied = MostPopular().fit([Session("t", (3, 1, 2), (0, 1, 2))])
    assert tied.recommend([0], 3).items.tolist() == [1, 2, 3]
    rng = random.Random(0)
    train = corpus(3)
    mp = MostPopular(15).fit(train)
    first = mp.recommend([0], 10).items.tolist()
    for _ in range(100):
        prompt = [rng.randrange(15) for _ in range(rng.randint(1, 6))]
        assert mp.recommend(prompt, 10).items.tolist() == first
        assert mp.recommend(list(reversed(prompt)), 10).items.tolist() == first


def test_popularity_table():
    table = PopularityTable.from_sessions([Session("a", (0, 0, 2), (0, 1, 2))], 4)
    assert table.counts.tolist() == [2, 0, 1, 0]
    assert table.total_interactions == 3
    assert table.top(2).items.tolist() == [0, 2]
