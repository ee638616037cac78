"""Acceptance criteria 1-10. Each test prints one ``CRITERION n: PASS|FAIL`` line.

The lines are also collected and repeated in the pytest terminal summary.
"""

import itertools
import json
import math
import os
import random
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from seqrec.bert4rec import Bert4Rec, Bert4RecConfig
from seqrec.cli import main
from seqrec.data import leave_one_out, load_interactions, prepare_dataset
from seqrec.embeddings import EmbeddingMatrix, fit_pca, project
from seqrec.hyperopt import Uniform, in_bounds, run_search
from seqrec.llmseqsim import LLMSeqSim
from seqrec.metrics import catalog_coverage, evaluate, novelty, rank_metrics, serendipity
from seqrec.neighbors import MostPopular, PopularityTable, SessionKNN
from seqrec.ranking import RankedList
from seqrec.synthetic import make_planted_dataset

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- 1. preprocessing reproduction ---------------------------------------------------

BEAUTY_ENV = "SEQREC_BEAUTY_PATH"
TABLE1 = {"sessions": 22_363, "items": 12_101, "interactions": 198_502, "avg_length": 8.9, "density_pct": 0.073}


def test_criterion_1_beauty_statistics():
    """The public Amazon Beauty reviews file must be supplied through SEQREC_BEAUTY_PATH."""
    path = os.environ.get(BEAUTY_ENV)
    if not path or not Path(path).is_file():
        report(1, False, f"Amazon Beauty reviews file not available (set {BEAUTY_ENV}); statistics not reproduced")
    start = time.perf_counter()
    fmt = "csv" if path.endswith(".csv") else "amazon-reviews-jsonl"
    ds, stats = prepare_dataset(load_interactions(path, fmt), p_core=5)
    elapsed = time.perf_counter() - start
    from seqrec.config import file_hash

    got = {"sessions": stats.n_sessions, "items": stats.n_items, "interactions": stats.n_interactions}
    ok = (got == {k: TABLE1[k] for k in got}
          and abs(stats.avg_length - TABLE1["avg_length"]) <= 0.05
          and abs(100 * stats.density - TABLE1["density_pct"]) <= 0.002
          and elapsed < 120)
    report(1, ok, f"{got} avg_length={stats.avg_length:.3f} density={100 * stats.density:.4f}% "
                  f"time={elapsed:.1f}s sha256={file_hash(path)}")


# -- 2. metric oracles -----------------------------------------------------------------


def _brute_rank(items, target, k):
    top = items[:k]
    if target not in top:
        return (0.0, 0.0, 0.0)
    r = top.index(target) + 1
    return (1.0 / math.log2(r + 1), 1.0, 1.0 / r)


def test_criterion_2_metric_oracles():
    start = time.perf_counter()
    rng = random.Random(2024)
    worst = 0.0
    for _ in range(1000):
        n_items = rng.randint(5, 60)
        k = rng.randint(1, 20)
        lists = [rng.sample(range(n_items), rng.randint(1, n_items)) for _ in range(rng.randint(1, 12))]
        targets = [rng.randrange(n_items) for _ in lists]
        counts = np.array([rng.choice([0, 1, 2, 5, 40]) for _ in range(n_items)])
        total = int(counts.sum()) or 1
        table = PopularityTable(counts, total)
        popular = table.top(k)

        for lst, t in zip(lists, targets):
            got = rank_metrics(RankedList(np.array(lst), np.zeros(len(lst))), t, k)
            worst = max(worst, *(abs(a - b) for a, b in zip(got, _brute_rank(lst, t, k))))
        union = set()
        for lst in lists:
            union.update(lst[:k])
        worst = max(worst, abs(catalog_coverage(lists, n_items, k) - len(union) / n_items))
        pop_top = popular.items.tolist()[:k]
        seren = sum(1 for lst, t in zip(lists, targets) if t in lst[:k] and t not in pop_top) / len(lists)
        worst = max(worst, abs(serendipity(lists, targets, popular, k) - seren))
        per = []
        for lst in lists:
            top = lst[:k]
            per.append(sum(-math.log2(max(counts[i], 1) / total) for i in top) / len(top))
        worst = max(worst, abs(novelty(lists, table, k) - sum(per) / len(per)))
    elapsed = time.perf_counter() - start
    report(2, worst <= 1e-9 and elapsed < 10, f"max abs deviation {worst:.2e} over 1000 fixtures, {elapsed:.1f}s")


# -- 3. gradient checks ------------------------------------------------------------------


def test_criterion_3_gradient_checks():
    import test_autograd as ta
    from seqrec import autograd as ag
    from test_bert4rec import bert_gradient_error

    start = time.perf_counter()
    failures = []
    checks = [ta.test_matmul_gradient, ta.test_add_scale_gradient, ta.test_gather_gradient,
              ta.test_softmax_gelu_gradient, ta.test_layer_norm_gradient,
              ta.test_dropout_reshape_transpose_gradient, ta.test_cross_entropy_gradient]
    for seed in range(10):
        for check in checks:
            try:
                check(seed)
            except AssertionError as exc:
                failures.append(f"{check.__name__}[{seed}]: {exc}")
    try:
        ta.test_tied_tensor_gets_sum_of_paths()
    except AssertionError as exc:
        failures.append(str(exc))
    worst_bert, where = 0.0, ""
    for seed in range(10):
        err, loc = bert_gradient_error(seed)
        if err > worst_bert:
            worst_bert, where = err, f"seed {seed} {loc}"
    elapsed = time.perf_counter() - start
    ok = not failures and worst_bert < 1e-3 and elapsed < 60
    detail = (f"10 op kinds x 10 seeds ok={not failures}; 2-layer d_model=8 BERT4Rec max rel err "
              f"{worst_bert:.2e} ({where}); {elapsed:.1f}s")
    report(3, ok, detail + ("" if not failures else f"; first failure: {failures[0]}"))


# -- 4. PCA --------------------------------------------------------------------------------


def test_criterion_4_pca_properties():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    ortho = recon = mean_dev = 0.0
    for seed in range(5):
        x = rng.standard_normal((300, 48)) * rng.uniform(0.1, 3.0, 48) + rng.standard_normal(48)
        m = EmbeddingMatrix(x, tuple(f"k{i}" for i in range(300)))
        full = fit_pca(m, d=48)
        ortho = max(ortho, np.abs(full.components @ full.components.T - np.eye(48)).max())
        coords = (x - full.mean) @ full.components.T
        recon = max(recon, np.abs(full.mean + coords @ full.components - x).max())
        reduced = project(fit_pca(m, d=16), m)
        mean_dev = max(mean_dev, np.abs(reduced.data.astype(np.float64).mean(axis=0)).max())
    elapsed = time.perf_counter() - start
    ok = ortho <= 1e-5 and recon < 1e-4 and mean_dev < 1e-5 and elapsed < 5
    report(4, ok, f"orthonormality {ortho:.1e}, reconstruction {recon:.1e}, projected mean {mean_dev:.1e}, "
                  f"{elapsed:.2f}s")


# -- 5. planted pattern end-to-end -------------------------------------------------------

PLANTED_BERT = dict(d_model=32, n_layers=1, n_heads=2, max_len=12, epochs=10, batch_size=128, lr=2e-3,
                    warmup_steps=50, dropout=0.1, pca_target_std=0.02)


def test_criterion_5_planted_pattern():
    start = time.perf_counter()
    planted = make_planted_dataset(n_items=500, n_sessions=5000, seed=0)
    ds = planted.dataset
    pairs = leave_one_out(ds.test)
    popularity = PopularityTable.from_sessions(ds.train, ds.n_items)
    reduced = project(fit_pca(planted.embeddings, 32), planted.embeddings)
    mp = evaluate(MostPopular(ds.n_items).fit(ds.train), pairs, popularity, ks=(10,))["ndcg@10"]
    scores = {mode: [] for mode in ("random", "llm-pca", "llm-pca-permuted")}
    trend_ok = True
    for seed in range(5):
        for mode in scores:
            cfg = Bert4RecConfig(**PLANTED_BERT, seed=seed, init_mode=mode, perm_seed=seed)
            model = Bert4Rec(ds.n_items, cfg, reduced).fit(ds.train)
            curve = model.loss_curve
            trend_ok &= curve[-1] < curve[0]
            scores[mode].append(evaluate(model, pairs, popularity, ks=(10,))["ndcg@10"])
    elapsed = time.perf_counter() - start
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    lift = mean["random"] / mp - 1 if mp > 0 else float("inf")
    ok = (lift >= 0.5 and mean["llm-pca"] >= mean["random"] >= mean["llm-pca-permuted"]
          and trend_ok and elapsed < 15 * 60)
    detail = (f"NDCG@10 MostPopular={mp:.4f} Random={mean['random']:.4f} (+{100 * lift:.0f}% vs MostPopular) "
              f"LlmPca={mean['llm-pca']:.4f} ({100 * (mean['llm-pca'] / mean['random'] - 1):+.1f}% vs Random) "
              f"LlmPcaPermuted={mean['llm-pca-permuted']:.4f}; per-seed {json.dumps({m: [round(x, 4) for x in v] for m, v in scores.items()})}; "
              f"{elapsed / 60:.1f} min")
    report(5, ok, detail)


# -- 6. LLMSeqSim -------------------------------------------------------------------------


def test_criterion_6_llmseqsim():
    import test_llmseqsim as tl

    start = time.perf_counter()
    mismatches = 0
    rng = np.random.default_rng(6)
    for strategy, measure in itertools.product(tl.STRATEGIES, tl.MEASURES):
        emb = tl.matrix(rng.standard_normal((300, 16)))
        rows = emb.data.tolist()
        model = LLMSeqSim(emb, strategy, measure)
        for trial in range(25):
            prompt = rng.integers(0, 300, size=int(rng.integers(1, 8))).tolist()
            model.exclude_seen = bool(trial % 2)
            got = model.recommend(prompt, 20)
            items, scores = tl.oracle_recommend(prompt, rows, strategy, measure, 20, model.exclude_seen)
            if got.items.tolist() != items or not np.allclose(got.scores, scores, rtol=1e-9, atol=1e-12):
                mismatches += 1
    props_ok = True
    for prop in (tl.test_self_similarity_is_maximal, tl.test_cosine_scale_invariance_dot_sensitivity):
        try:
            prop()
        except AssertionError:
            props_ok = False
    elapsed = time.perf_counter() - start
    report(6, mismatches == 0 and props_ok and elapsed < 10,
           f"12 strategy x measure combinations, {mismatches} oracle mismatches in 300 prompts; "
           f"self-similarity/scale-invariance ok={props_ok}; {elapsed:.2f}s")


# -- 7. SKNN / V_SKNN ------------------------------------------------------------------------


def test_criterion_7_neighbors():
    import test_neighbors as tn

    start = time.perf_counter()
    mismatches = checked = 0
    for seed in range(20):
        train = tn.corpus(seed)
        rng = random.Random(seed + 1000)
        for variant in ("sknn", "vsknn"):
            for m, sample in ((3, None), (100, None), (5, 10)):
                model = SessionKNN(m_neighbors=m, sample_size=sample, variant=variant, n_items=15).fit(train)
                for _ in range(10):
                    prompt = [rng.randrange(15) for _ in range(rng.randint(1, 5))]
                    got = model.recommend(prompt, 10)
                    items, scores = tn.brute_force(train, prompt, 10, m, variant, sample, 15)
                    checked += 1
                    if got.items.tolist() != items or got.scores.tolist() != scores:
                        mismatches += 1
    elapsed = time.perf_counter() - start
    report(7, mismatches == 0 and elapsed < 10,
           f"{checked} queries on 50-session corpora over 20 seeds, {mismatches} mismatches; {elapsed:.2f}s")


# -- 8. LLMSeqPrompt -------------------------------------------------------------------------


def test_criterion_8_llmseqprompt(tmp_path):
    import test_llmseqprompt as tp
    from seqrec.data import build_sessions
    from seqrec.llmseqprompt import build_finetune_dataset, write_finetune_file

    start = time.perf_counter()
    fixtures = Path(__file__).parent / "fixtures"
    log = load_interactions(fixtures / "figure1_sessions.csv")
    samples, _ = build_finetune_dataset(build_sessions(log.interactions), log.catalog)
    write_finetune_file(samples, tmp_path / "ft.jsonl")
    golden = (tmp_path / "ft.jsonl").read_bytes() == (fixtures / "figure1_finetune.jsonl").read_bytes()
    failures = []
    checks = [tp.test_frequency_ranking_and_duplicates, tp.test_hallucination_maps_to_nearest_by_dot_product,
              tp.test_slate_properties, tp.test_recommender_end_to_end]
    checks += [lambda s=s: tp.test_identical_generations_fill_with_neighbors(s) for s in range(5)]
    for check in checks:
        try:
            check()
        except AssertionError as exc:
            failures.append(repr(exc))
    elapsed = time.perf_counter() - start
    report(8, golden and not failures and elapsed < 5,
           f"Figure 1 golden bytes match={golden}; slate oracles failed={len(failures)}; {elapsed:.2f}s")


# -- 9. TPE vs random ---------------------------------------------------------------------------


def test_criterion_9_tpe_beats_random():
    start = time.perf_counter()
    space = {"x": Uniform(0.0, 1.0)}
    objective = lambda cfg: [-(cfg["x"] - 0.7) ** 2]
    wins, all_in, rows = 0, True, []
    for seed in range(5):
        best = {}
        for sampler in ("tpe", "random"):
            top, hist = run_search(space, 60, None, [], 0, sampler=sampler, seed=seed, objective_fn=objective)
            all_in &= all(in_bounds(t.config, space) for t in hist) and len(hist) == 60
            best[sampler] = top
        wins += best["tpe"].objective > best["random"].objective
        rows.append(f"seed {seed}: tpe x={best['tpe'].config['x']:.4f} random x={best['random'].config['x']:.4f}")
    elapsed = time.perf_counter() - start
    report(9, wins >= 4 and all_in and elapsed < 30,
           f"TPE wins {wins}/5 at 60 trials, all in bounds={all_in}; {'; '.join(rows)}; {elapsed:.1f}s")


# -- 10. determinism ------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path, capsys):
    fixtures = Path(__file__).parent / "fixtures"
    script = tmp_path / "script.json"
    script.write_text(json.dumps({"__default__": [" Argan Oil Hair Mask ###"] * 3 + [" Unknown Serum ###"]}))
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "seed": 3,
        "dataset": {"path": str(fixtures / "interactions_200.csv")},
        "embeddings": {"dim": 32, "pca_dim": 8},
        "models": {"bert4rec": {"d_model": 8, "epochs": 2, "max_len": 10, "warmup_steps": 1},
                   "llmseqprompt": {"script": str(script)}},
        "evaluation": {"n_runs": 2},
        "search": {"budget": 4, "n_folds": 2, "space": {"vsknn": {"m_neighbors": {"type": "int", "lo": 1, "hi": 30}}}},
    }))
    stages = [["prepare-data"], ["fetch-embeddings"], ["fit-pca"], ["train", "bert4rec", "--init", "llm-pca"],
              ["train", "llmseqprompt"],
              ["evaluate", "most-popular", "sknn", "vsknn", "llmseqsim", "llmseqprompt", "bert4rec"],
              ["sweep", "vsknn"], ["ablate-permutation"], ["report"]]

    def pipeline(out: Path) -> dict[str, bytes]:
        for stage in stages:
            code = main(["--config", str(config), "--out-dir", str(out), "--workers", "2", *stage])
            assert code == 0, (stage, capsys.readouterr().err)
        capsys.readouterr()
        files = {}
        for p in sorted(out.rglob("*")):
            if p.is_file():
                rel = str(p.relative_to(out))
                data = p.read_bytes()
                if rel.endswith(".meta.json"):  # creation time lives only in the sidecar
                    meta = json.loads(data)
                    meta.pop("created")
                    data = json.dumps(meta, sort_keys=True).encode()
                files[rel] = data
        return files

    first = pipeline(tmp_path / "run1")
    second = pipeline(tmp_path / "run2")
    # a full re-run inside a used directory (stale outputs removed) as well
    shutil.rmtree(tmp_path / "run1")
    third = pipeline(tmp_path / "run1")
    differing = sorted(k for k in set(first) | set(second) | set(third)
                       if not (first.get(k) == second.get(k) == third.get(k)))
    primary = [k for k in first if not k.endswith(".meta.json")]
    report(10, not differing and len(primary) > 20,
           f"{len(primary)} primary outputs across {len(stages)} stages, byte-identical across 3 runs; "
           f"differing={differing[:5]}")
