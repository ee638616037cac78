"""Item embeddings: providers, the on-disk cache, and PCA reduction."""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._retry import TransientError, retry_with_backoff
from .data import Item

logger = logging.getLogger(__name__)

CACHE_MAGIC = "seqrec-emb v1"
API_KEY_ENV = "SEQREC_EMBEDDINGS_API_KEY"
MAX_BATCH = 512


class EmbeddingError(RuntimeError):
    pass


class AuthenticationError(EmbeddingError):
    pass


class MissingEmbeddingsError(EmbeddingError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        preview = ", ".join(repr(m) for m in self.missing[:5])
        super().__init__(f"{len(self.missing)} names could not be embedded: {preview}")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row ``i`` belongs to catalog item ``i``; ``keys[i]`` is its external id."""

    data: np.ndarray
    keys: tuple[str, ...]
    missing: frozenset[int] = frozenset()

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] != len(self.keys):
            raise ValueError(f"data shape {data.shape} does not match {len(self.keys)} keys")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding matrix contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def n_items(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def zero_rows(self) -> list[int]:
        return [i for i in np.flatnonzero(~self.data.any(axis=1)).tolist() if i not in self.missing]


def save_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    """Write the text cache format: a header, then ``key<TAB>base64(<f4 bytes)`` per row."""
    lines = [f"{CACHE_MAGIC} {matrix.n_items} {matrix.dim}"]
    for key, row in zip(matrix.keys, matrix.data):
        lines.append(f"{_escape(key)}\t{base64.b64encode(row.astype('<f4').tobytes()).decode('ascii')}")
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    keys, rows = _read_cache(Path(path))
    dim = rows.shape[1] if rows.size else 0
    return EmbeddingMatrix(rows.reshape(len(keys), dim), tuple(keys))


def _read_cache(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        header = fh.readline().split()
        if header[:2] != CACHE_MAGIC.split() or len(header) != 4:
            raise EmbeddingError(f"{path}: not a {CACHE_MAGIC} file")
        n, dim = int(header[2]), int(header[3])
        keys, rows = [], np.empty((n, dim), dtype=np.float32)
        for i, line in enumerate(fh):
            if i >= n:
                raise EmbeddingError(f"{path}: more rows than the header's {n}")
            key, blob = line.rstrip("\n").split("\t")
            keys.append(_unescape(key))
            rows[i] = np.frombuffer(base64.b64decode(blob), dtype="<f4")
    if len(keys) != n:
        raise EmbeddingError(f"{path}: header says {n} rows, found {len(keys)}")
    return keys, rows


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(text: str) -> str:
    out, it = [], iter(text)
    for ch in it:
        if ch == "\\":
            nxt = next(it, "")
            out.append({"t": "\t", "n": "\n", "r": "\r"}.get(nxt, nxt))
        else:
            out.append(ch)
    return "".join(out)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


# -- providers -----------------------------------------------------------------


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """One row per text, shape ``(len(texts), dim)``."""


class SyntheticProvider:
    """Deterministic pseudo-random unit vectors derived from a hash of the text."""

    def __init__(self, dim: int = 1536, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.n_requests = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.n_requests += 1
        out = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
            rng = np.random.Generator(np.random.Philox(int.from_bytes(digest[:16], "little")))
            v = rng.standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class StaticProvider:
    """Looks texts up in a fixed mapping; unknown texts raise ``KeyError``."""

    def __init__(self, vectors: dict[str, Sequence[float]]):
        self.vectors = {k: np.asarray(v, dtype=np.float32) for k, v in vectors.items()}
        self.dim = len(next(iter(self.vectors.values())))
        self.n_requests = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        self.n_requests += 1
        return np.stack([self.vectors[t] for t in texts]) if texts else np.zeros((0, self.dim), np.float32)


class FileProvider(StaticProvider):
    """Serves vectors from a cache-format file whose keys are the texts."""

    def __init__(self, path: str | Path):
        keys, rows = _read_cache(Path(path))
        super().__init__(dict(zip(keys, rows)))


class OpenAIEmbeddingProvider:
    """Client for an OpenAI-compatible ``/embeddings`` endpoint.

    The API key is read from the environment variable named by
    ``api_key_env`` and is never logged or written to disk.
    """

    def __init__(
        self,
        model: str = "text-embedding-ada-002",
        endpoint: str = "https://api.openai.com/v1/embeddings",
        api_key_env: str = API_KEY_ENV,
        dim: int = 1536,
        timeout: float = 60.0,
        max_chars: int = 24_000,
    ):
        self.model = model
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.dim = dim
        self.timeout = timeout
        self.max_chars = max_chars
        self.n_requests = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        too_long = [t for t in texts if len(t) > self.max_chars]
        if too_long:
            raise EmbeddingError(f"{len(too_long)} names exceed the provider limit of {self.max_chars} characters")
        key = os.environ.get(self.api_key_env)
        if not key:
            raise AuthenticationError(f"environment variable {self.api_key_env} is not set")
        self.n_requests += 1
        try:
            resp = httpx.post(
                self.endpoint,
                headers={"Authorization": f"Bearer {key}"},
                json={"model": self.model, "input": list(texts)},
                timeout=self.timeout,
            )
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"provider rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            retry_after = resp.headers.get("retry-after")
            raise TransientError(f"HTTP {resp.status_code}", retry_after=float(retry_after) if retry_after else None)
        resp.raise_for_status()
        data = sorted(resp.json()["data"], key=lambda d: d["index"])
        return np.asarray([d["embedding"] for d in data], dtype=np.float32)


class CachedProvider:
    """Wraps a provider with a text-keyed cache persisted in the cache file format.

    Lookups for texts already in the cache never reach the wrapped provider.
    Misses are fetched in batches of at most ``batch_size`` texts with up to
    ``max_workers`` batches in flight, retried on transient failures, and
    written to disk before :meth:`embed` returns.
    """

    def __init__(
        self,
        provider: EmbeddingProvider,
        path: str | Path | None = None,
        batch_size: int = MAX_BATCH,
        max_workers: int = 4,
        max_attempts: int = 5,
        base_delay: float = 1.0,
    ):
        self.provider = provider
        self.dim = provider.dim
        self.path = Path(path) if path is not None else None
        self.batch_size = min(batch_size, MAX_BATCH)
        self.max_workers = max_workers
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self._store: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.is_file():
            keys, rows = _read_cache(self.path)
            self._store = dict(zip(keys, rows))

    def __contains__(self, text: str) -> bool:
        return text in self._store

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        unique = list(dict.fromkeys(texts))
        todo = [t for t in unique if t not in self._store]
        self.hits += len(unique) - len(todo)
        self.misses += len(todo)
        if todo:
            self._fetch(todo)
        missing = [t for t in unique if t not in self._store]
        if missing:
            raise MissingEmbeddingsError(missing)
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self._store[t] for t in texts])

    def _fetch(self, todo: list[str]) -> None:
        batches = [todo[i:i + self.batch_size] for i in range(0, len(todo), self.batch_size)]

        def run(batch: list[str]):
            try:
                return batch, retry_with_backoff(
                    lambda: self.provider.embed(batch),
                    max_attempts=self.max_attempts,
                    base_delay=self.base_delay,
                )
            except TransientError as exc:
                logger.error("giving up on a batch of %d names: %s", len(batch), exc)
                return batch, None

        if len(batches) == 1 or self.max_workers <= 1:
            results = [run(b) for b in batches]
        else:
            with ThreadPoolExecutor(self.max_workers) as pool:
                results = list(pool.map(run, batches))
        with self._lock:
            for batch, rows in results:
                if rows is None:
                    continue
                rows = np.asarray(rows, dtype=np.float32)
                if rows.shape != (len(batch), self.dim):
                    raise EmbeddingError(f"provider returned shape {rows.shape} for {len(batch)} names")
                for text, row in zip(batch, rows):
                    self._store[text] = row
            self.flush()

    def flush(self) -> None:
        if self.path is None:
            return
        keys = sorted(self._store)
        data = np.stack([self._store[k] for k in keys]) if keys else np.zeros((0, self.dim), np.float32)
        save_embeddings(self.path, EmbeddingMatrix(data, tuple(keys)))


def fetch_embeddings(
    catalog: Sequence[Item],
    provider: EmbeddingProvider,
    permissive: bool = False,
) -> EmbeddingMatrix:
    """Embed every catalog item by name; row ``i`` is item ``i``.

    Items sharing a name share a row value. With ``permissive``, names the
    provider could not embed get the mean of the embedded rows and are
    listed in :attr:`EmbeddingMatrix.missing`; otherwise they raise
    :class:`MissingEmbeddingsError`.
    """
    names = [it.name for it in catalog]
    unique = list(dict.fromkeys(names))
    try:
        rows = provider.embed(unique)
        table = dict(zip(unique, rows))
        missing: list[str] = []
    except MissingEmbeddingsError as exc:
        if not permissive:
            raise
        missing = exc.missing
        found = [n for n in unique if n not in set(missing)]
        table = dict(zip(found, provider.embed(found))) if found else {}
    if missing:
        if not table:
            raise MissingEmbeddingsError(missing)
        fill = np.mean(np.stack(list(table.values())).astype(np.float64), axis=0).astype(np.float32)
        for name in missing:
            logger.warning("no embedding for %r; using the catalog mean", name)
            table[name] = fill
    data = np.stack([table[n] for n in names]).astype(np.float32)
    missing_rows = frozenset(i for i, n in enumerate(names) if n in set(missing))
    return EmbeddingMatrix(data, tuple(it.external_id for it in catalog), missing_rows)


# -- PCA -----------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    """Principal axes as rows of ``components`` in descending explained variance."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def d(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "components": self.components, "explained_variance": self.explained_variance}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "PcaModel":
        return cls(
            np.asarray(arrays["mean"], np.float64),
            np.asarray(arrays["components"], np.float64),
            np.asarray(arrays["explained_variance"], np.float64),
        )


def fit_pca(matrix: EmbeddingMatrix | np.ndarray, d: int = 64, rank_tol: float = 1e-10) -> PcaModel:
    """Top-``d`` principal axes of the row-centered matrix via SVD.

    Each axis is sign-flipped so its largest-magnitude coordinate is
    positive. Directions beyond the numerical rank have no variance; they
    are replaced by a Gram-Schmidt completion of the standard basis (taken
    in index order) against the axes already chosen, and get zero explained
    variance.
    """
    x = np.asarray(matrix.data if isinstance(matrix, EmbeddingMatrix) else matrix, dtype=np.float64)
    n, dim = x.shape
    if not 1 <= d <= min(n, dim):
        raise ValueError(f"d must be in [1, {min(n, dim)}], got {d}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    variance = s**2 / max(n - 1, 1)
    rank = int(np.sum(s > rank_tol * max(s[0] if s.size else 0.0, 1.0)))
    if rank < d:
        logger.warning("input rank %d is below d=%d; completing the basis deterministically", rank, d)
        vt = _complete_basis(vt[:rank], d, dim)
        variance = np.concatenate([variance[:rank], np.zeros(d - rank)])
    components = vt[:d].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean, components, variance[:d].copy())


def _complete_basis(basis: np.ndarray, d: int, dim: int) -> np.ndarray:
    rows = [r for r in basis]
    for j in range(dim):
        if len(rows) == d:
            break
        e = np.zeros(dim)
        e[j] = 1.0
        for r in rows:
            e -= (r @ e) * r
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            rows.append(e / norm)
    return np.stack(rows)


def project(pca: PcaModel, matrix: EmbeddingMatrix, target_std: float | None = None) -> EmbeddingMatrix:
    """Coordinates of each row in the principal basis, optionally rescaled to ``target_std``."""
    if matrix.dim != pca.input_dim:
        raise ValueError(f"matrix dim {matrix.dim} does not match PCA input dim {pca.input_dim}")
    coords = (matrix.data.astype(np.float64) - pca.mean) @ pca.components.T
    if target_std is not None:
        std = coords.std()
        if std > 0:
            coords *= target_std / std
    return EmbeddingMatrix(coords.astype(np.float32), matrix.keys, matrix.missing)
