"""Fine-tuning corpora for a generative model and slate assembly from its completions."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._retry import TransientError, retry_with_backoff
from .data import Item, Session
from .embeddings import EmbeddingMatrix, EmbeddingProvider
from .ranking import RankedList

logger = logging.getLogger(__name__)

PROMPT_END = " \n\n###\n\n"
COMPLETION_END = " ###"
API_KEY_ENV = "SEQREC_COMPLETIONS_API_KEY"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptSample:
    prompt: str
    completion: str

    def to_json(self) -> str:
        return json.dumps({"prompt": self.prompt, "completion": self.completion}, ensure_ascii=False)


def format_prompt(names: Sequence[str]) -> str:
    """Numbered product list followed by the prompt separator."""
    return "".join(f"{i}. {name}\n" for i, name in enumerate(names, start=1)) + PROMPT_END


def format_completion(name: str) -> str:
    return f" {name}{COMPLETION_END}"


def build_finetune_dataset(
    sessions: Sequence[Session], catalog: Sequence[Item]
) -> tuple[list[PromptSample], int]:
    """One prompt/completion pair per session with at least two items.

    Returns the samples and the number of skipped one-item sessions.
    """
    samples, skipped = [], 0
    for s in sessions:
        if len(s.items) < 2:
            skipped += 1
            continue
        names = [catalog[i].name for i in s.items]
        samples.append(PromptSample(format_prompt(names[:-1]), format_completion(names[-1])))
    if skipped:
        logger.info("skipped %d sessions with a single item", skipped)
    return samples, skipped


def write_finetune_file(samples: Sequence[PromptSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample in samples:
            fh.write(sample.to_json() + "\n")


def read_finetune_file(path: str | Path) -> list[PromptSample]:
    with open(path, encoding="utf-8") as fh:
        return [PromptSample(**json.loads(line)) for line in fh if line.strip()]


def clean_completion(text: str) -> str:
    """Strip whitespace and the trailing ``###`` marker."""
    text = text.strip()
    while text.endswith("###"):
        text = text[:-3].rstrip()
    return text


# -- backends ------------------------------------------------------------------


class GenerativeBackend(Protocol):
    def complete(self, prompt: str, n: int) -> list[str]:
        """Up to ``n`` raw completions for ``prompt``."""


class ScriptedBackend:
    """Returns fixed completions per prompt; can fail a set number of times first."""

    def __init__(self, script: dict[str, list[str]], default: list[str] | None = None, fail_times: int = 0):
        self.script = script
        self.default = default
        self.fail_times = fail_times
        self.calls = 0

    def complete(self, prompt: str, n: int) -> list[str]:
        self.calls += 1
        if self.fail_times > 0:
            self.fail_times -= 1
            raise TransientError("scripted failure")
        out = self.script.get(prompt, self.default)
        if out is None:
            raise GenerationError("no scripted completion for prompt")
        return list(out[:n])


class OpenAICompletionBackend:
    """Client for an OpenAI-compatible ``/completions`` endpoint serving a fine-tuned model."""

    def __init__(self, model: str, endpoint: str = "https://api.openai.com/v1/completions",
                 api_key_env: str = API_KEY_ENV, temperature: float = 1.0, max_tokens: int = 64,
                 timeout: float = 60.0):
        self.model = model
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout = timeout

    def complete(self, prompt: str, n: int) -> list[str]:
        import httpx

        key = os.environ.get(self.api_key_env)
        if not key:
            raise GenerationError(f"environment variable {self.api_key_env} is not set")
        try:
            resp = httpx.post(
                self.endpoint,
                headers={"Authorization": f"Bearer {key}"},
                json={
                    "model": self.model,
                    "prompt": prompt,
                    "n": n,
                    "temperature": self.temperature,
                    "max_tokens": self.max_tokens,
                    "stop": [COMPLETION_END],
                },
                timeout=self.timeout,
            )
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GenerationError(f"backend returned HTTP {resp.status_code}")
        return [choice["text"] for choice in resp.json()["choices"]]


def generate_candidates(
    backend: GenerativeBackend,
    prompt: str,
    n_samples: int = 20,
    max_attempts: int = 5,
    base_delay: float = 1.0,
    sleep=None,
) -> list[str]:
    """Sample completions, retrying transient backend failures with backoff."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    kwargs = {"sleep": sleep} if sleep is not None else {}
    try:
        raw = retry_with_backoff(lambda: backend.complete(prompt, n_samples),
                                 max_attempts=max_attempts, base_delay=base_delay, **kwargs)
    except TransientError as exc:
        raise GenerationError(f"backend unreachable after {max_attempts} attempts: {exc}") from exc
    cleaned = [c for c in (clean_completion(r) for r in raw[:n_samples]) if c]
    if not cleaned:
        raise GenerationError("backend produced no usable completions")
    return cleaned


# -- slate assembly ------------------------------------------------------------


@dataclass
class SlateAssemblyReport:
    exact_matches: int = 0
    fuzzy_mapped: int = 0
    hallucinated_mapped: int = 0
    duplicates_collapsed: int = 0
    duplicates_remapped: int = 0
    short: bool = False

    @property
    def total(self) -> int:
        return self.exact_matches + self.fuzzy_mapped + self.hallucinated_mapped + self.duplicates_collapsed


def _normalize(name: str) -> str:
    return " ".join(name.split()).casefold()


class SlateAssembler:
    """Turns raw completions into a ranked list of unique catalog items.

    Each completion resolves to a catalog item by exact name, then by
    case- and whitespace-insensitive name, and otherwise (a hallucination) to
    the item whose embedding has the largest dot product with the
    completion's own embedding. Items are ranked by how often they were
    generated, ties by first appearance. Repeated generations then fill the
    remaining slots: each repeat is replaced by the not-yet-listed item
    nearest (by dot product) to the repeated item's embedding.
    """

    def __init__(self, catalog: Sequence[Item], embeddings: EmbeddingMatrix,
                 provider: EmbeddingProvider | None = None):
        if embeddings.n_items != len(catalog):
            raise ValueError("embeddings do not cover the catalog")
        self.catalog = catalog
        self.embeddings = embeddings.data.astype(np.float64)
        self.provider = provider
        self.exact: dict[str, int] = {}
        self.loose: dict[str, int] = {}
        for item in catalog:
            self.exact.setdefault(item.name, item.index)
            self.loose.setdefault(_normalize(item.name), item.index)

    def nearest(self, query: np.ndarray, exclude: set[int] = frozenset()) -> int | None:
        scores = self.embeddings @ query
        if exclude:
            scores[list(exclude)] = -np.inf
        best = int(np.argmax(scores))
        return None if not np.isfinite(scores[best]) else best

    def assemble(self, raw: Sequence[str], k: int) -> tuple[RankedList, SlateAssemblyReport]:
        report = SlateAssemblyReport()
        resolved: list[int] = []
        queries: dict[int, np.ndarray] = {}
        unresolved = [r for r in dict.fromkeys(raw) if r not in self.exact and _normalize(r) not in self.loose]
        hallucination_vectors = {}
        if unresolved:
            if self.provider is None:
                raise ValueError("hallucinated completions need an embedding provider")
            hallucination_vectors = dict(zip(unresolved, self.provider.embed(unresolved)))
        kinds = []
        for text in raw:
            if text in self.exact:
                item, kind = self.exact[text], "exact"
            elif _normalize(text) in self.loose:
                item, kind = self.loose[_normalize(text)], "fuzzy"
            else:
                vec = np.asarray(hallucination_vectors[text], dtype=np.float64)
                item, kind = self.nearest(vec), "hallucinated"
            resolved.append(item)
            kinds.append(kind)

        counts = Counter(resolved)
        first_seen: dict[int, int] = {}
        for pos, item in enumerate(resolved):
            first_seen.setdefault(item, pos)
        ranked = sorted(counts, key=lambda it: (-counts[it], first_seen[it]))

        seen: set[int] = set()
        for item, kind in zip(resolved, kinds):
            if item in seen:
                report.duplicates_collapsed += 1
                continue
            seen.add(item)
            if kind == "exact":
                report.exact_matches += 1
            elif kind == "fuzzy":
                report.fuzzy_mapped += 1
            else:
                report.hallucinated_mapped += 1

        slate = ranked[:k]
        scores = [float(counts[it]) for it in slate]
        included = set(slate)
        if len(slate) < k:
            for item in ranked:
                for _ in range(counts[item] - 1):
                    if len(slate) >= k:
                        break
                    nxt = self.nearest(self.embeddings[item], included)
                    if nxt is None:
                        break
                    slate.append(nxt)
                    included.add(nxt)
                    scores.append(0.0)
                    report.duplicates_remapped += 1
        report.short = len(slate) < k
        if report.short:
            logger.debug("slate has %d of %d items", len(slate), k)
        return RankedList(np.asarray(slate, dtype=np.int64), np.asarray(scores)), report


def assemble_slate(raw: Sequence[str], catalog: Sequence[Item], embeddings: EmbeddingMatrix, k: int,
                   provider: EmbeddingProvider | None = None) -> tuple[RankedList, SlateAssemblyReport]:
    return SlateAssembler(catalog, embeddings, provider).assemble(raw, k)


class LLMSeqPrompt:
    """Recommender that prompts a generative backend with the session's product names."""

    def __init__(self, backend: GenerativeBackend, catalog: Sequence[Item], embeddings: EmbeddingMatrix,
                 provider: EmbeddingProvider | None = None, n_samples: int = 20):
        self.backend = backend
        self.catalog = catalog
        self.assembler = SlateAssembler(catalog, embeddings, provider)
        self.n_samples = n_samples
        self.last_report: SlateAssemblyReport | None = None

    def fit(self, train: Sequence[Session] = ()) -> "LLMSeqPrompt":
        return self

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList:
        text = format_prompt([self.catalog[i].name for i in prompt])
        raw = generate_candidates(self.backend, text, self.n_samples)
        slate, self.last_report = self.assembler.assemble(raw, k)
        return slate
