"""Experiment configuration: defaults, validation, overrides and provenance hashes.

A config is a JSON object whose sections mirror :data:`DEFAULTS`. Loading
merges the file over the defaults and rejects any key the defaults do not
declare, reporting the full key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import subprocess
from dataclasses import asdict, fields
from importlib import metadata
from pathlib import Path
from typing import Any, Sequence

from .bert4rec import Bert4RecConfig

MODELS = ("most-popular", "sknn", "vsknn", "llmseqsim", "llmseqprompt", "bert4rec")

_BERT_DEFAULTS = {k: v for k, v in asdict(Bert4RecConfig()).items() if k not in ("seed", "init_mode")}

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dataset": {
        "path": None,
        "format": "csv",
        "titles": None,
        "p_core": 5,
        "test_fraction": 0.1,
        "min_test_len": 2,
    },
    "embeddings": {
        "provider": "synthetic",
        "model": "text-embedding-ada-002",
        "endpoint": "https://api.openai.com/v1/embeddings",
        "file": None,
        "dim": 1536,
        "cache": None,
        "batch_size": 512,
        "permissive": False,
        "pca_dim": 64,
    },
    "models": {
        "most-popular": {},
        "sknn": {"m_neighbors": 100, "sample_size": 1000},
        "vsknn": {"m_neighbors": 100, "sample_size": 1000},
        "llmseqsim": {"aggregation": "last", "similarity": "cosine", "decay_rate": 0.5, "exclude_seen": False},
        "llmseqprompt": {
            "backend": "scripted",
            "script": None,
            "model": None,
            "endpoint": "https://api.openai.com/v1/completions",
            "n_samples": 20,
            "temperature": 1.0,
        },
        "bert4rec": _BERT_DEFAULTS,
    },
    "evaluation": {"cutoffs": [10, 20], "n_runs": 5},
    "search": {"sampler": "tpe", "budget": 50, "n_folds": 3, "space": {}},
}

# sections whose keys are free-form (checked later by the consumer)
_OPEN = {("search", "space"), ("models", "most-popular")}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


def _merge(base: dict, override: dict, path: tuple[str, ...] = ()) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = ".".join(path + (key,))
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        default = base[key]
        if path + (key,) in _OPEN:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = copy.deepcopy(value)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            out[key] = _merge(default, value, path + (key,))
        else:
            out[key] = _check_type(where, default, value)
    return out


def _check_type(where: str, default, value):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def resolve(overrides: dict | None = None) -> dict:
    """Defaults merged with ``overrides`` and validated."""
    cfg = _merge(DEFAULTS, overrides or {})
    validate(cfg)
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return resolve()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(raw)


def apply_overrides(cfg: dict, assignments: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` assignments; values parse as JSON, else as strings."""
    patch: dict = {}
    for item in assignments:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = patch
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return resolve(_deep_update(copy.deepcopy(cfg), patch))


def _deep_update(base: dict, patch: dict) -> dict:
    for key, value in patch.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def validate(cfg: dict) -> None:
    ds = cfg["dataset"]
    if ds["format"] not in ("csv", "amazon-reviews-jsonl"):
        raise ConfigError(f"dataset.format: unknown format {ds['format']!r}")
    if not 0.0 < ds["test_fraction"] < 1.0:
        raise ConfigError("dataset.test_fraction: must be in (0, 1)")
    if ds["p_core"] is not None and ds["p_core"] < 1:
        raise ConfigError("dataset.p_core: must be >= 1 or null")
    emb = cfg["embeddings"]
    if emb["provider"] not in ("synthetic", "openai", "file"):
        raise ConfigError(f"embeddings.provider: unknown provider {emb['provider']!r}")
    if emb["pca_dim"] < 1:
        raise ConfigError("embeddings.pca_dim: must be >= 1")
    if cfg["models"]["llmseqprompt"]["backend"] not in ("scripted", "openai"):
        raise ConfigError("models.llmseqprompt.backend: must be 'scripted' or 'openai'")
    ev = cfg["evaluation"]
    if not ev["cutoffs"] or any(not isinstance(k, int) or k < 1 for k in ev["cutoffs"]):
        raise ConfigError("evaluation.cutoffs: need positive integers")
    if ev["n_runs"] < 1:
        raise ConfigError("evaluation.n_runs: must be >= 1")
    if cfg["search"]["sampler"] not in ("tpe", "random"):
        raise ConfigError("search.sampler: must be 'tpe' or 'random'")
    if cfg["search"]["budget"] < 1:
        raise ConfigError("search.budget: must be >= 1")
    try:
        bert_config(cfg, seed=0, init_mode="random").validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"models.bert4rec: {exc}") from exc


def bert_config(cfg: dict, seed: int, init_mode: str, overrides: dict | None = None) -> Bert4RecConfig:
    values = {**cfg["models"]["bert4rec"], **(overrides or {}), "seed": seed, "init_mode": init_mode}
    known = {f.name for f in fields(Bert4RecConfig)}
    return Bert4RecConfig(**{k: v for k, v in values.items() if k in known})


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(obj) -> str:
    """Short SHA-256 of the canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    """``git describe`` of the source checkout when available, else the package version."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "0+unknown"
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{version}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return version
