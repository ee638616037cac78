"""Accuracy and beyond-accuracy metrics, the evaluation runner, and report tables."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import PromptTarget
from .neighbors import PopularityTable
from .ranking import RankedList

logger = logging.getLogger(__name__)

CUTOFFS = (10, 20)
METRICS = ("ndcg", "hr", "mrr", "catcov", "seren", "novel")
CSV_COLUMNS = ("model", "k", *METRICS, "n_sessions")


def _items(recs) -> list[int]:
    if isinstance(recs, RankedList):
        return recs.items.tolist()
    return [int(i) for i in recs]


def rank_metrics(recommendations, target: int, k: int) -> tuple[float, float, float]:
    """``(ndcg, hit, mrr)`` for a single relevant item within the top ``k``."""
    items = _items(recommendations)[:k]
    try:
        r = items.index(target) + 1
    except ValueError:
        return 0.0, 0.0, 0.0
    return 1.0 / math.log2(r + 1), 1.0, 1.0 / r


def catalog_coverage(lists: Iterable, n_items: int, k: int) -> float:
    seen: set[int] = set()
    for recs in lists:
        seen.update(_items(recs)[:k])
    return len(seen) / n_items


def serendipity(lists: Sequence, targets: Sequence[int], popular, k: int) -> float:
    """Share of sessions whose target is hit but absent from the popularity top-``k``."""
    if not lists:
        return 0.0
    popular_top = set(_items(popular)[:k])
    hits = 0
    for recs, target in zip(lists, targets):
        if target in _items(recs)[:k] and target not in popular_top:
            hits += 1
    return hits / len(lists)


def novelty(lists: Sequence, popularity: PopularityTable, k: int) -> float:
    """Mean self-information ``-log2(count / total)`` per slot, averaged over sessions.

    Items never seen in training count as one interaction.
    """
    total = popularity.total_interactions
    per_session = []
    for recs in lists:
        items = _items(recs)[:k]
        if not items:
            continue
        counts = [max(int(popularity.counts[i]) if i < popularity.n_items else 0, 1) for i in items]
        per_session.append(math.fsum(-math.log2(c / total) for c in counts) / len(items))
    if not per_session:
        raise ValueError("novelty of empty recommendation lists")
    return math.fsum(per_session) / len(per_session)


@dataclass(frozen=True)
class CutoffMetrics:
    ndcg: float
    hr: float
    mrr: float
    catcov: float
    seren: float
    novel: float

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


@dataclass
class MetricsReport:
    model: str
    n_sessions: int
    cutoffs: dict[int, CutoffMetrics]
    metadata: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        """``report["ndcg@20"]``."""
        name, k = key.split("@")
        return getattr(self.cutoffs[int(k)], name)

    def rows(self) -> list[dict]:
        return [
            {"model": self.model, "k": k, **self.cutoffs[k].as_dict(), "n_sessions": self.n_sessions}
            for k in sorted(self.cutoffs)
        ]


def _recommend_all(recommender, prompts: Sequence[Sequence[int]], k: int, workers: int) -> list[RankedList]:
    batch = getattr(recommender, "recommend_batch", None)
    if batch is not None:
        return list(batch(prompts, k))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda p: recommender.recommend(p, k), prompts))
    return [recommender.recommend(p, k) for p in prompts]


def evaluate_lists(
    lists: Sequence,
    targets: Sequence[int],
    popularity: PopularityTable,
    n_items: int,
    ks: Sequence[int] = CUTOFFS,
    model: str = "model",
) -> MetricsReport:
    """Metrics of precomputed recommendation lists (one per target)."""
    if not targets:
        raise ValueError("empty test set")
    cutoffs = {}
    n = len(targets)
    for k in ks:
        per = [rank_metrics(recs, t, k) for recs, t in zip(lists, targets)]
        cutoffs[k] = CutoffMetrics(
            ndcg=math.fsum(p[0] for p in per) / n,
            hr=math.fsum(p[1] for p in per) / n,
            mrr=math.fsum(p[2] for p in per) / n,
            catcov=catalog_coverage(lists, n_items, k),
            seren=serendipity(lists, targets, popularity.top(k), k),
            novel=novelty(lists, popularity, k),
        )
    return MetricsReport(model, n, cutoffs)


def evaluate(
    recommender,
    pairs: Sequence[PromptTarget],
    popularity: PopularityTable,
    n_items: int | None = None,
    ks: Sequence[int] = CUTOFFS,
    model: str | None = None,
    workers: int = 1,
) -> MetricsReport:
    """Recommend once at the largest cutoff for every prompt and score all cutoffs.

    Sums use exactly rounded summation, so the report does not depend on the
    order of ``pairs``.
    """
    if not pairs:
        raise ValueError("empty test set")
    n_items = popularity.n_items if n_items is None else n_items
    lists = _recommend_all(recommender, [p.prompt for p in pairs], max(ks), workers)
    for recs in lists:
        items = _items(recs)
        if len(set(items)) != len(items):
            raise ValueError("recommendation list contains duplicates")
    name = model or type(recommender).__name__
    return evaluate_lists(lists, [p.target for p in pairs], popularity, n_items, ks, name)


@dataclass
class BestOfN:
    best: MetricsReport | None
    mean: dict[str, float]
    std: dict[str, float]
    reports: list[MetricsReport]
    seeds: list[int]
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failures


def best_of_n(run: Callable[[int], MetricsReport], n: int = 5, seed0: int = 0,
              select: str = "ndcg@20") -> BestOfN:
    """Run ``run(seed)`` for seeds ``seed0 .. seed0+n-1`` and keep the best by ``select``.

    Failed runs are recorded in ``failures`` and excluded from the summary.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    reports, seeds, failures = [], [], {}
    for seed in range(seed0, seed0 + n):
        try:
            report = run(seed)
        except Exception as exc:  # a failed run must not lose the others
            logger.exception("run with seed %d failed", seed)
            failures[seed] = f"{type(exc).__name__}: {exc}"
            continue
        report.metadata.setdefault("seed", seed)
        reports.append(report)
        seeds.append(seed)
    if not reports:
        return BestOfN(None, {}, {}, [], [], failures)
    scores = [r[select] for r in reports]
    best = reports[int(np.argmax(scores))]
    keys = [f"{m}@{k}" for k in sorted(best.cutoffs) for m in METRICS]
    mean = {key: float(np.mean([r[key] for r in reports])) for key in keys}
    std = {key: float(np.std([r[key] for r in reports])) for key in keys}
    return BestOfN(best, mean, std, reports, seeds, failures)


# -- report files --------------------------------------------------------------


def _fmt(x) -> str:
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def write_report_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """One row per model and cutoff with the columns of the results tables."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            for row in report.rows():
                writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def read_report_csv(path: str | Path) -> list[MetricsReport]:
    grouped: dict[str, MetricsReport] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            rep = grouped.setdefault(row["model"], MetricsReport(row["model"], int(row["n_sessions"]), {}))
            rep.cutoffs[int(row["k"])] = CutoffMetrics(**{m: float(row[m]) for m in METRICS})
    return list(grouped.values())


def sort_by(reports: Sequence[MetricsReport], key: str = "ndcg@20") -> list[MetricsReport]:
    return sorted(reports, key=lambda r: (-r[key], r.model))


def format_table(reports: Sequence[MetricsReport], ks: Sequence[int] = CUTOFFS) -> str:
    """Aligned text table: one row per model, metric columns grouped by cutoff."""
    header = ["Model"] + [f"{m}@{k}" for k in ks for m in METRICS]
    body = [[r.model] + [f"{r[f'{m}@{k}']:.3f}" for k in ks for m in METRICS] for r in reports]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = []
    for j, row in enumerate([header] + body):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table(reports: Sequence[MetricsReport], path: str | Path, ks: Sequence[int] = CUTOFFS) -> None:
    Path(path).write_text(format_table(reports, ks), encoding="utf-8")
