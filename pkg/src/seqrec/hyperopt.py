"""Hyperparameter search: random sampling and a univariate Tree-structured Parzen Estimator."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .autograd import make_rng
from .data import PromptTarget, Session, leave_one_out
from .metrics import evaluate
from .neighbors import PopularityTable

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")


@dataclass(frozen=True)
class LogUniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError("need 0 < lo < hi")


@dataclass(frozen=True)
class IntRange:
    lo: int
    hi: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")


@dataclass(frozen=True)
class Categorical:
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise ValueError("categorical options must be non-empty")


Dimension = Uniform | LogUniform | IntRange | Categorical
SearchSpace = dict[str, Dimension]


def parse_space(spec: dict[str, dict]) -> SearchSpace:
    """Build a space from config entries like ``{"type": "log-uniform", "lo": 1e-4, "hi": 1e-2}``."""
    space: SearchSpace = {}
    for name, entry in spec.items():
        kind = entry.get("type")
        if kind == "uniform":
            space[name] = Uniform(float(entry["lo"]), float(entry["hi"]))
        elif kind == "log-uniform":
            space[name] = LogUniform(float(entry["lo"]), float(entry["hi"]))
        elif kind == "int":
            space[name] = IntRange(int(entry["lo"]), int(entry["hi"]))
        elif kind == "categorical":
            space[name] = Categorical(tuple(entry["options"]))
        else:
            raise ValueError(f"search dimension {name!r}: unknown type {kind!r}")
    return space


@dataclass
class Trial:
    trial_id: int
    config: dict[str, Any]
    fold_scores: list[float] = field(default_factory=list)
    objective: float | None = None
    status: str = "running"
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {"trial_id": self.trial_id, "config": self.config, "fold_scores": self.fold_scores,
             "objective": self.objective, "status": self.status, "error": self.error},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "Trial":
        return cls(**json.loads(line))


def _bounds(dim: Dimension) -> tuple[float, float]:
    """Internal continuous bounds (log scale for log-uniform, +/-0.5 around integers)."""
    if isinstance(dim, LogUniform):
        return math.log(dim.lo), math.log(dim.hi)
    if isinstance(dim, IntRange):
        return dim.lo - 0.5, dim.hi + 0.5
    return dim.lo, dim.hi


def _to_internal(dim: Dimension, value) -> float:
    return math.log(value) if isinstance(dim, LogUniform) else float(value)


def _from_internal(dim: Dimension, x: float):
    lo, hi = _bounds(dim)
    x = min(max(x, lo), hi)
    if isinstance(dim, LogUniform):
        return float(min(max(math.exp(x), dim.lo), dim.hi))
    if isinstance(dim, IntRange):
        return int(min(max(round(x), dim.lo), dim.hi))
    return float(x)


def _sample_random(dim: Dimension, rng: np.random.Generator):
    if isinstance(dim, Categorical):
        return dim.options[int(rng.integers(len(dim.options)))]
    lo, hi = _bounds(dim)
    return _from_internal(dim, float(rng.uniform(lo, hi)))


_SQRT2 = math.sqrt(2.0)


class ParzenEstimator:
    """Gaussian kernels at observed points plus one wide prior kernel.

    Observed points share the bandwidth ``1.06 * std * n**(-1/5)``, floored
    at 1% of the range, unless ``bandwidth`` is given. The prior kernel sits at the middle of the range with
    the full range as its width and keeps every region reachable. Kernels are
    renormalized to the bounds and densities floored so ratios stay finite.
    """

    def __init__(self, points: Sequence[float], lo: float, hi: float, prior: bool = True,
                 bandwidth: float | None = None):
        pts = np.asarray(points, dtype=np.float64)
        self.lo, self.hi = lo, hi
        n = len(pts)
        sigma = float(np.std(pts)) if n > 1 else 0.0
        bw = max(1.06 * sigma * n ** (-0.2) if n else 0.0, 0.01 * (hi - lo))
        if bandwidth is not None:
            bw = bandwidth
        self.centers = np.concatenate([pts, [0.5 * (lo + hi)]]) if prior or n == 0 else pts
        self.widths = np.full(len(self.centers), bw)
        if prior or n == 0:
            self.widths[-1] = hi - lo
        self.bandwidth = bw
        cdf = lambda x: 0.5 * (1.0 + np.vectorize(math.erf)((x - self.centers) / (self.widths * _SQRT2)))
        self._mass = np.maximum(cdf(hi) - cdf(lo), 1e-12)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        which = rng.integers(len(self.centers), size=size)
        out = self.centers[which] + self.widths[which] * rng.standard_normal(size)
        # reflect into the bounds instead of piling mass on the edges
        width = self.hi - self.lo
        out = np.abs(np.mod(out - self.lo, 2 * width) - width)
        return self.lo + (width - out)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.centers[None, :]) / self.widths[None, :]
        kern = np.exp(-0.5 * z * z) / (self.widths[None, :] * math.sqrt(2 * math.pi) * self._mass[None, :])
        return np.log(np.maximum(kern.mean(axis=1), 1e-12))


def _categorical_log_probs(values: Sequence, options: tuple) -> np.ndarray:
    counts = np.ones(len(options))
    for v in values:
        counts[options.index(v)] += 1
    return np.log(counts / counts.sum())


def suggest(
    history: Sequence[Trial],
    space: SearchSpace,
    sampler: str = "tpe",
    rng: np.random.Generator | None = None,
    gamma: float = 0.25,
    n_candidates: int = 24,
    n_startup: int = 10,
) -> dict[str, Any]:
    """Next configuration to evaluate (the objective is maximized).

    ``random`` draws every dimension independently. ``tpe`` does the same
    until ``n_startup`` trials are complete (or while all objectives tie); afterwards it splits the
    completed trials at the ``gamma`` quantile into good and bad sets, and
    per dimension draws ``n_candidates`` points from the good density and
    keeps the one with the highest good/bad density ratio.
    """
    if not space:
        raise ValueError("empty search space")
    rng = rng if rng is not None else make_rng(0)
    if sampler not in ("random", "tpe"):
        raise ValueError(f"unknown sampler {sampler!r}")
    done = [t for t in history if t.status == "complete" and t.objective is not None]
    # identical objectives carry no preference, so the good/bad split would be arbitrary
    flat = len({t.objective for t in done}) <= 1
    if sampler == "random" or len(done) < n_startup or flat:
        return {name: _sample_random(dim, rng) for name, dim in space.items()}

    ordered = sorted(done, key=lambda t: (-t.objective, t.trial_id))
    n_good = max(1, math.ceil(gamma * len(ordered)))
    good, bad = ordered[:n_good], ordered[n_good:]
    point = {}
    for name, dim in space.items():
        if isinstance(dim, Categorical):
            lg = _categorical_log_probs([t.config[name] for t in good], dim.options)
            lb = _categorical_log_probs([t.config[name] for t in bad], dim.options)
            draws = rng.choice(len(dim.options), size=n_candidates, p=np.exp(lg))
            best = draws[int(np.argmax(lg[draws] - lb[draws]))]
            point[name] = dim.options[int(best)]
            continue
        lo, hi = _bounds(dim)
        l_est = ParzenEstimator([_to_internal(dim, t.config[name]) for t in good], lo, hi)
        # the bad density reuses the good bandwidth: with its own, wider
        # bandwidth it is nearly flat and the ratio just tracks the good peak
        g_est = ParzenEstimator([_to_internal(dim, t.config[name]) for t in bad], lo, hi,
                                bandwidth=l_est.bandwidth)
        cands = l_est.sample(rng, n_candidates)
        ratio = l_est.log_pdf(cands) - g_est.log_pdf(cands)
        point[name] = _from_internal(dim, float(cands[int(np.argmax(ratio))]))
    return point


def in_bounds(point: dict[str, Any], space: SearchSpace) -> bool:
    for name, dim in space.items():
        v = point[name]
        if isinstance(dim, Categorical):
            if v not in dim.options:
                return False
        elif not dim.lo <= v <= dim.hi:
            return False
    return True


# -- folds and search ----------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: tuple[Session, ...]
    validation: tuple[PromptTarget, ...]
    validation_sessions: tuple[Session, ...]


def make_validation_folds(train: Sequence[Session], n_folds: int = 3, min_len: int = 2) -> list[Fold]:
    """Expanding-window temporal folds.

    Sessions ordered by ``(start_time, id)`` are cut into ``n_folds + 1``
    equal blocks; fold ``f`` trains on blocks ``0..f`` and validates on the
    leave-one-out pairs of block ``f + 1``.
    """
    ordered = sorted(train, key=lambda s: (s.start_time, s.id))
    n_blocks = n_folds + 1
    if len(ordered) < 2 * n_blocks:
        raise ValueError(f"need at least {2 * n_blocks} train sessions for {n_folds} folds")
    cuts = [round(len(ordered) * b / n_blocks) for b in range(n_blocks + 1)]
    folds = []
    for f in range(n_folds):
        sub_train = tuple(ordered[: cuts[f + 1]])
        block = tuple(ordered[cuts[f + 1]: cuts[f + 2]])
        pairs = tuple(leave_one_out(block, min_len))
        if not pairs:
            raise ValueError(f"fold {f} has no validation sessions of length >= {min_len}")
        folds.append(Fold(sub_train, pairs, block))
    return folds


def evaluate_config(config: dict[str, Any], model_factory: Callable[[dict], Any], folds: Sequence[Fold],
                    n_items: int, metric: str = "ndcg@20") -> list[float]:
    scores = []
    k = int(metric.split("@")[1])
    for fold in folds:
        model = model_factory(config)
        model.fit(fold.train)
        pop = PopularityTable.from_sessions(fold.train, n_items)
        scores.append(evaluate(model, fold.validation, pop, n_items, ks=(k,))[metric])
    return scores


def load_history(path: str | Path) -> list[Trial]:
    path = Path(path)
    if not path.is_file():
        return []
    with open(path, encoding="utf-8") as fh:
        return [Trial.from_json(line) for line in fh if line.strip()]


def run_search(
    space: SearchSpace,
    budget: int,
    model_factory: Callable[[dict], Any],
    folds: Sequence[Fold],
    n_items: int,
    sampler: str = "tpe",
    seed: int = 0,
    history_path: str | Path | None = None,
    objective_fn: Callable[[dict], list[float]] | None = None,
    **suggest_kwargs,
) -> tuple[Trial | None, list[Trial]]:
    """Run ``budget`` trials, appending each finished trial to ``history_path``.

    Trials already in the history file count toward the budget, so an
    interrupted search resumes where it stopped. Every trial draws from its
    own generator keyed by ``(seed, trial_id)``. A trial that raises is
    recorded as failed and the search continues.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    history = load_history(history_path) if history_path else []
    objective_fn = objective_fn or (lambda cfg: evaluate_config(cfg, model_factory, folds, n_items))
    for trial_id in range(len(history), budget):
        rng = make_rng([seed, trial_id])
        trial = Trial(trial_id, suggest(history, space, sampler, rng, **suggest_kwargs))
        try:
            trial.fold_scores = [float(s) for s in objective_fn(trial.config)]
            trial.objective = math.fsum(trial.fold_scores) / len(trial.fold_scores)
            trial.status = "complete"
        except Exception as exc:  # record and keep searching
            logger.warning("trial %d failed: %s", trial_id, exc)
            trial.status, trial.error = "failed", f"{type(exc).__name__}: {exc}"
        history.append(trial)
        if history_path:
            with open(history_path, "a", encoding="utf-8") as fh:
                fh.write(trial.to_json() + "\n")
    complete = [t for t in history if t.status == "complete"]
    best = max(complete, key=lambda t: (t.objective, -t.trial_id)) if complete else None
    return best, history
