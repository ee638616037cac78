"""Command-line entry point: ``seqrec <subcommand>``.

Stages read and write fixed locations below ``--out-dir``::

    data/        catalog.csv train.csv test.csv stats.json      prepare-data
    embeddings/  items.emb (+ cache.emb)                        fetch-embeddings
    pca/         pca.ckpt reduced.emb                           fit-pca
    models/      <model>/seed<k>.ckpt, finetune.jsonl           train
    reports/     <model>.csv <model>.txt                        evaluate
    sweeps/      <model>/history.jsonl best.json                sweep
    ablation/    permutation.csv permutation.txt                ablate-permutation
    report.csv report.txt                                       report

Every primary output gets a ``<name>.meta.json`` sidecar with the config
hash, build id, seed, input and output hashes and a creation time. A stage
whose recorded inputs and outputs are unchanged is skipped.

Exit codes: 0 success, 2 config error, 3 missing input or artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .bert4rec import INIT_MODES, Bert4Rec
from .config import (
    MODELS,
    ConfigError,
    apply_overrides,
    bert_config,
    build_id,
    canonical_json,
    content_hash,
    file_hash,
    load_config,
)
from .data import (
    DataError,
    Dataset,
    leave_one_out,
    load_dataset,
    load_interactions,
    load_titles,
    prepare_dataset,
    save_dataset,
)
from .embeddings import (
    CachedProvider,
    EmbeddingMatrix,
    FileProvider,
    OpenAIEmbeddingProvider,
    SyntheticProvider,
    fetch_embeddings,
    fit_pca,
    load_embeddings,
    project,
    save_embeddings,
)
from .hyperopt import make_validation_folds, parse_space, run_search
from .llmseqprompt import (
    LLMSeqPrompt,
    OpenAICompletionBackend,
    ScriptedBackend,
    build_finetune_dataset,
    write_finetune_file,
)
from .llmseqsim import LLMSeqSim
from .metrics import (
    BestOfN,
    MetricsReport,
    best_of_n,
    evaluate,
    format_table,
    read_report_csv,
    sort_by,
    write_report_csv,
)
from .neighbors import MostPopular, PopularityTable, SessionKNN

logger = logging.getLogger("seqrec")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

BERT_LABELS = {"random": "bert4rec", "llm-pca": "llm2bert4rec", "llm-pca-permuted": "llm2bert4rec-permuted"}


class MissingArtifactError(RuntimeError):
    """A stage input is absent; the message names the subcommand producing it."""

    def __init__(self, path: Path, producer: str | None):
        hint = f"run `seqrec {producer}` first" if producer else "check the configured path"
        super().__init__(f"missing {path}: {hint}")
        self.path = path
        self.producer = producer


@dataclass
class Context:
    cfg: dict
    out_dir: Path
    workers: int

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    @property
    def config_hash(self) -> str:
        return content_hash(self.cfg)

    def path(self, *parts: str) -> Path:
        return self.out_dir.joinpath(*parts)


# -- provenance ----------------------------------------------------------------


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def _require(path: Path, producer: str | None) -> Path:
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return path


def _is_fresh(outputs: Sequence[Path], stamp: str) -> bool:
    meta = _meta_path(outputs[0])
    if not meta.is_file():
        return False
    recorded = json.loads(meta.read_text(encoding="utf-8"))
    if recorded.get("stamp") != stamp:
        return False
    hashes = recorded.get("outputs", {})
    return all(p.is_file() and hashes.get(p.name) == file_hash(p) for p in outputs)


def _write_meta(ctx: Context, outputs: Sequence[Path], stage: str, stamp: str,
                inputs: dict[str, Path] | None = None, extra: dict | None = None) -> None:
    meta = {
        "stage": stage,
        "stamp": stamp,
        "config_hash": ctx.config_hash,
        "build_id": build_id(),
        "seed": ctx.seed,
        "inputs": {name: file_hash(p) for name, p in sorted((inputs or {}).items())},
        "outputs": {p.name: file_hash(p) for p in outputs},
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    meta.update(extra or {})
    _meta_path(outputs[0]).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _stamp(stage: str, inputs: dict[str, Path], **settings) -> str:
    return content_hash({"stage": stage, "inputs": {k: file_hash(p) for k, p in sorted(inputs.items())},
                         "settings": settings})


def _save_resolved_config(ctx: Context) -> None:
    target = ctx.path("configs", f"{ctx.config_hash}.json")
    if not target.is_file():
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(json.dumps(ctx.cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- stage inputs --------------------------------------------------------------


def _data_files(ctx: Context) -> dict[str, Path]:
    return {n: _require(ctx.path("data", f"{n}.csv"), "prepare-data") for n in ("catalog", "train", "test")}


def _load_data(ctx: Context) -> Dataset:
    _data_files(ctx)
    return load_dataset(ctx.path("data"))


def _item_embeddings(ctx: Context, ds: Dataset) -> EmbeddingMatrix:
    matrix = load_embeddings(_require(ctx.path("embeddings", "items.emb"), "fetch-embeddings"))
    if matrix.keys != tuple(it.external_id for it in ds.catalog):
        raise MissingArtifactError(ctx.path("embeddings", "items.emb"), "fetch-embeddings")
    return matrix


def _reduced_embeddings(ctx: Context, ds: Dataset) -> EmbeddingMatrix:
    matrix = load_embeddings(_require(ctx.path("pca", "reduced.emb"), "fit-pca"))
    if matrix.keys != tuple(it.external_id for it in ds.catalog):
        raise MissingArtifactError(ctx.path("pca", "reduced.emb"), "fit-pca")
    return matrix


def _provider(ctx: Context):
    emb = ctx.cfg["embeddings"]
    if emb["provider"] == "synthetic":
        base = SyntheticProvider(emb["dim"])
    elif emb["provider"] == "file":
        if not emb["file"]:
            raise ConfigError("embeddings.file: required for the file provider")
        base = FileProvider(_require(Path(emb["file"]), None))
    else:
        base = OpenAIEmbeddingProvider(emb["model"], emb["endpoint"], dim=emb["dim"])
    cache = Path(emb["cache"]) if emb["cache"] else ctx.path("embeddings", "cache.emb")
    cache.parent.mkdir(parents=True, exist_ok=True)
    return CachedProvider(base, cache, batch_size=emb["batch_size"], max_workers=ctx.workers)


# -- stages --------------------------------------------------------------------


def cmd_prepare_data(ctx: Context, args) -> int:
    ds_cfg = ctx.cfg["dataset"]
    if not ds_cfg["path"]:
        raise ConfigError("dataset.path: required for prepare-data")
    source = _require(Path(ds_cfg["path"]), None)
    inputs = {"source": source}
    if ds_cfg["titles"]:
        inputs["titles"] = _require(Path(ds_cfg["titles"]), None)
    out = ctx.path("data")
    outputs = [out / "stats.json", out / "catalog.csv", out / "train.csv", out / "test.csv"]
    settings = {k: ds_cfg[k] for k in ("format", "p_core", "test_fraction")}
    stamp = _stamp("prepare-data", inputs, **settings)
    if not _is_fresh(outputs, stamp):
        titles = load_titles(inputs["titles"]) if "titles" in inputs else None
        log = load_interactions(source, ds_cfg["format"], titles)
        ds, stats = prepare_dataset(log, ds_cfg["p_core"], ds_cfg["test_fraction"])
        save_dataset(ds, out)
        summary = {
            "source_sha256": file_hash(source),
            "n_rejected": log.n_rejected,
            "n_sessions": stats.n_sessions,
            "n_items": stats.n_items,
            "n_interactions": stats.n_interactions,
            "avg_length": stats.avg_length,
            "density": stats.density,
            "n_train_sessions": len(ds.train),
            "n_test_sessions": len(ds.test),
            "split_boundary": ds.split_boundary,
            **settings,
        }
        (out / "stats.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _write_meta(ctx, outputs, "prepare-data", stamp, inputs)
    else:
        logger.info("data is up to date")
    stats = json.loads((out / "stats.json").read_text(encoding="utf-8"))
    digest = content_hash({p.name: file_hash(p) for p in outputs[1:]})
    print(f"sessions={stats['n_sessions']} items={stats['n_items']} interactions={stats['n_interactions']} "
          f"avg_length={stats['avg_length']:.2f} density={100 * stats['density']:.3f}% "
          f"train={stats['n_train_sessions']} test={stats['n_test_sessions']} hash={digest}")
    return EXIT_OK


def cmd_fetch_embeddings(ctx: Context, args) -> int:
    files = _data_files(ctx)
    emb = ctx.cfg["embeddings"]
    target = ctx.path("embeddings", "items.emb")
    settings = {k: emb[k] for k in ("provider", "model", "endpoint", "file", "dim", "permissive")}
    stamp = _stamp("fetch-embeddings", {"catalog": files["catalog"]}, **settings)
    if _is_fresh([target], stamp):
        logger.info("embeddings are up to date")
        return EXIT_OK
    ds = load_dataset(ctx.path("data"))
    provider = _provider(ctx)
    matrix = fetch_embeddings(ds.catalog, provider, permissive=emb["permissive"])
    save_embeddings(target, matrix)
    _write_meta(ctx, [target], "fetch-embeddings", stamp, {"catalog": files["catalog"]},
                {"cache_hits": provider.hits, "cache_misses": provider.misses, "missing_items": len(matrix.missing)})
    print(f"embedded {matrix.n_items} items (dim {matrix.dim}); cache hits={provider.hits} misses={provider.misses}"
          f" missing={len(matrix.missing)}")
    return EXIT_OK


def cmd_fit_pca(ctx: Context, args) -> int:
    source = _require(ctx.path("embeddings", "items.emb"), "fetch-embeddings")
    d = ctx.cfg["embeddings"]["pca_dim"]
    outputs = [ctx.path("pca", "reduced.emb"), ctx.path("pca", "pca.ckpt")]
    stamp = _stamp("fit-pca", {"embeddings": source}, pca_dim=d)
    if _is_fresh(outputs, stamp):
        logger.info("PCA is up to date")
        return EXIT_OK
    matrix = load_embeddings(source)
    pca = fit_pca(matrix, d)
    outputs[0].parent.mkdir(parents=True, exist_ok=True)
    save_embeddings(outputs[0], project(pca, matrix))
    ag.save_checkpoint(outputs[1], pca.to_arrays())
    total = float(np.var(matrix.data.astype(np.float64), axis=0, ddof=1).sum())
    kept = float(pca.explained_variance.sum()) / total if total > 0 else 1.0
    _write_meta(ctx, outputs, "fit-pca", stamp, {"embeddings": source}, {"explained_variance_ratio": kept})
    print(f"PCA {matrix.dim} -> {d}: explained variance {kept:.3f}")
    return EXIT_OK


def _check_bert_dims(ctx: Context) -> None:
    if ctx.cfg["embeddings"]["pca_dim"] != ctx.cfg["models"]["bert4rec"]["d_model"]:
        raise ConfigError("embeddings.pca_dim: must equal models.bert4rec.d_model for LLM initialization")


def _bert_checkpoint(ctx: Context, ds: Dataset, init: str, seed: int, overrides: dict | None = None) -> Bert4Rec:
    """Train (or reuse) the BERT4Rec checkpoint for ``init`` and ``seed``."""
    files = _data_files(ctx)
    inputs = {"train": files["train"], "catalog": files["catalog"]}
    reduced = None
    if init != "random":
        _check_bert_dims(ctx)
        reduced = _reduced_embeddings(ctx, ds)
        inputs["reduced"] = ctx.path("pca", "reduced.emb")
    config = bert_config(ctx.cfg, seed, init, overrides)
    target = ctx.path("models", BERT_LABELS[init], f"seed{seed}.ckpt")
    stamp = _stamp("train", inputs, model="bert4rec", config=asdict(config))
    if _is_fresh([target], stamp):
        return Bert4Rec.load(target)
    model = Bert4Rec(len(ds.catalog), config, reduced).fit(list(ds.train))
    target.parent.mkdir(parents=True, exist_ok=True)
    model.save(target)
    _write_meta(ctx, [target, target.with_name(target.name + ".json")], "train", stamp, inputs)
    logger.info("trained %s seed %d: final loss %.4f", BERT_LABELS[init], seed, model.loss_curve[-1])
    return model


def _scripted_backend(section: dict) -> ScriptedBackend:
    if not section["script"]:
        raise ConfigError("models.llmseqprompt.script: the scripted backend needs a script file")
    script = json.loads(_require(Path(section["script"]), None).read_text(encoding="utf-8"))
    default = script.pop("__default__", None)
    return ScriptedBackend(script, default)


def build_model(ctx: Context, name: str, ds: Dataset, overrides: dict | None = None):
    """Unfitted recommender ``name`` configured from its section plus ``overrides``."""
    section = {**ctx.cfg["models"][name], **(overrides or {})}
    n_items = len(ds.catalog)
    if name == "most-popular":
        return MostPopular(n_items)
    if name in ("sknn", "vsknn"):
        return SessionKNN(section["m_neighbors"], section["sample_size"], variant=name, n_items=n_items)
    if name == "llmseqsim":
        return LLMSeqSim(_item_embeddings(ctx, ds), section["aggregation"], section["similarity"],
                         section["decay_rate"], section["exclude_seen"])
    if name == "llmseqprompt":
        if section["backend"] == "scripted":
            backend = _scripted_backend(section)
        else:
            if not section["model"]:
                raise ConfigError("models.llmseqprompt.model: name of the fine-tuned model is required")
            backend = OpenAICompletionBackend(section["model"], section["endpoint"],
                                              temperature=section["temperature"])
        return LLMSeqPrompt(backend, ds.catalog, _item_embeddings(ctx, ds), _provider(ctx), section["n_samples"])
    raise ConfigError(f"unknown model {name!r}")


def cmd_train(ctx: Context, args) -> int:
    ds = _load_data(ctx)
    if args.model == "bert4rec":
        model = _bert_checkpoint(ctx, ds, args.init, ctx.seed)
        print(f"{BERT_LABELS[args.init]} seed {ctx.seed}: {model.n_parameters()} parameters, "
              f"loss {model.loss_curve[0]:.4f} -> {model.loss_curve[-1]:.4f}")
        return EXIT_OK
    if args.model == "llmseqprompt":
        files = _data_files(ctx)
        target = ctx.path("models", "llmseqprompt", "finetune.jsonl")
        stamp = _stamp("train", {"train": files["train"], "catalog": files["catalog"]}, model="llmseqprompt")
        if not _is_fresh([target], stamp):
            samples, skipped = build_finetune_dataset(list(ds.train), ds.catalog)
            target.parent.mkdir(parents=True, exist_ok=True)
            write_finetune_file(samples, target)
            _write_meta(ctx, [target], "train", stamp, files, {"n_samples": len(samples), "n_skipped": skipped})
        print(f"fine-tuning file: {target}")
        return EXIT_OK
    build_model(ctx, args.model, ds).fit(list(ds.train))
    print(f"{args.model} has no persisted state; it is fitted on the fly by `evaluate`")
    return EXIT_OK


def _label(name: str, init: str) -> str:
    return BERT_LABELS[init] if name == "bert4rec" else name


def _evaluate_model(ctx: Context, ds: Dataset, name: str, init: str) -> tuple[MetricsReport, BestOfN | None]:
    pairs = leave_one_out(ds.test, ctx.cfg["dataset"]["min_test_len"])
    if not pairs:
        raise DataError("no test session is long enough for leave-one-out")
    popularity = PopularityTable.from_sessions(ds.train, len(ds.catalog))
    ks = tuple(ctx.cfg["evaluation"]["cutoffs"])
    label = _label(name, init)
    if name != "bert4rec":
        model = build_model(ctx, name, ds).fit(list(ds.train))
        report = evaluate(model, pairs, popularity, len(ds.catalog), ks, label, workers=ctx.workers)
        report.metadata.update(seed=ctx.seed, config_hash=ctx.config_hash)
        return report, None

    def run(seed: int) -> MetricsReport:
        model = _bert_checkpoint(ctx, ds, init, seed)
        return evaluate(model, pairs, popularity, len(ds.catalog), ks, label, workers=ctx.workers)

    select = f"ndcg@{max(ks)}"
    result = best_of_n(run, ctx.cfg["evaluation"]["n_runs"], seed0=ctx.seed, select=select)
    if result.best is None:
        raise RuntimeError(f"every {label} run failed: {result.failures}")
    result.best.metadata.update(config_hash=ctx.config_hash)
    return result.best, result


def cmd_evaluate(ctx: Context, args) -> int:
    ds = _load_data(ctx)
    reports = []
    for name in args.models:
        report, runs = _evaluate_model(ctx, ds, name, args.init)
        csv_path = ctx.path("reports", f"{report.model}.csv")
        txt_path = csv_path.with_suffix(".txt")
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        write_report_csv([report], csv_path)
        txt_path.write_text(format_table([report], tuple(sorted(report.cutoffs))), encoding="utf-8")
        extra = {"model": report.model, "n_sessions": report.n_sessions}
        if runs is not None:
            extra.update(runs={"seeds": runs.seeds, "best_seed": report.metadata["seed"], "mean": runs.mean,
                               "std": runs.std, "failures": {str(k): v for k, v in runs.failures.items()}})
        _write_meta(ctx, [csv_path, txt_path], "evaluate", "", {}, extra)
        reports.append(report)
    sys.stdout.write(format_table(reports, tuple(ctx.cfg["evaluation"]["cutoffs"])))
    return EXIT_OK


def cmd_sweep(ctx: Context, args) -> int:
    ds = _load_data(ctx)
    search = ctx.cfg["search"]
    spec = search["space"].get(args.model)
    if not spec:
        raise ConfigError(f"search.space.{args.model}: no search space declared")
    try:
        space = parse_space(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"search.space.{args.model}: {exc}") from exc
    known = set(ctx.cfg["models"][args.model])
    unknown = sorted(set(space) - known)
    if unknown:
        raise ConfigError(f"search.space.{args.model}: unknown hyperparameters {unknown}")
    folds = make_validation_folds(list(ds.train), search["n_folds"], ctx.cfg["dataset"]["min_test_len"])
    reduced = None
    if args.model == "bert4rec" and args.init != "random":
        _check_bert_dims(ctx)
        reduced = _reduced_embeddings(ctx, ds)

    def factory(point: dict):
        if args.model == "bert4rec":
            return Bert4Rec(len(ds.catalog), bert_config(ctx.cfg, ctx.seed, args.init, point), reduced)
        return build_model(ctx, args.model, ds, point)

    label = _label(args.model, args.init)
    out = ctx.path("sweeps", label)
    out.mkdir(parents=True, exist_ok=True)
    history_path = out / "history.jsonl"
    marker = content_hash({"space": spec, "sampler": search["sampler"], "seed": ctx.seed,
                           "model": ctx.cfg["models"][args.model], "n_folds": search["n_folds"]})
    marker_path = out / "search.json"
    if history_path.is_file():
        previous = json.loads(marker_path.read_text(encoding="utf-8")).get("marker") if marker_path.is_file() else None
        if previous != marker:
            raise ConfigError(f"{history_path} belongs to a different search; use another --out-dir")
    marker_path.write_text(json.dumps({"marker": marker, "space": spec}, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    best, history = run_search(space, search["budget"], factory, folds, len(ds.catalog),
                               sampler=search["sampler"], seed=ctx.seed, history_path=history_path)
    if best is None:
        raise RuntimeError("every trial failed")
    best_path = out / "best.json"
    best_path.write_text(best.to_json() + "\n", encoding="utf-8")
    _write_meta(ctx, [best_path, history_path], "sweep", marker, {},
                {"n_trials": len(history), "n_failed": sum(t.status == "failed" for t in history)})
    print(f"best trial {best.trial_id}: ndcg@20={best.objective:.4f} config={canonical_json(best.config)}")
    return EXIT_OK


def cmd_ablate_permutation(ctx: Context, args) -> int:
    ds = _load_data(ctx)
    _check_bert_dims(ctx)
    _reduced_embeddings(ctx, ds)
    ks = tuple(ctx.cfg["evaluation"]["cutoffs"])
    results = {init: _evaluate_model(ctx, ds, "bert4rec", init)[1] for init in INIT_MODES}
    out = ctx.path("ablation")
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "permutation.csv"
    write_report_csv([results[i].best for i in INIT_MODES], csv_path)
    k = ks[0]
    base = results["random"].mean[f"ndcg@{k}"]
    lines = [f"{'init':<18}{'mean ndcg@' + str(k):>16}{'std':>10}{'best ndcg@' + str(k):>16}{'vs random':>12}"]
    for init in INIT_MODES:
        r = results[init]
        mean = r.mean[f"ndcg@{k}"]
        rel = f"{100 * (mean / base - 1):+.1f}%" if base > 0 else "n/a"
        lines.append(f"{init:<18}{mean:>16.4f}{r.std[f'ndcg@{k}']:>10.4f}{r.best[f'ndcg@{k}']:>16.4f}{rel:>12}")
    table = "\n".join(lines) + "\n"
    txt_path = out / "permutation.txt"
    txt_path.write_text(table, encoding="utf-8")
    _write_meta(ctx, [csv_path, txt_path], "ablate-permutation", "", {},
                {"seeds": results["random"].seeds, "mean": {i: results[i].mean for i in INIT_MODES}})
    sys.stdout.write(table)
    return EXIT_OK


def cmd_report(ctx: Context, args) -> int:
    paths = [Path(p) for p in args.reports] or sorted(ctx.path("reports").glob("*.csv"))
    if not paths:
        raise MissingArtifactError(ctx.path("reports", "*.csv"), "evaluate")
    reports = []
    for p in paths:
        reports.extend(read_report_csv(_require(p, "evaluate")))
    ks = sorted({k for r in reports for k in r.cutoffs})
    key = f"ndcg@{20 if 20 in ks else max(ks)}"
    ordered = sort_by(reports, key)
    csv_path, txt_path = ctx.path("report.csv"), ctx.path("report.txt")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(ordered, csv_path)
    table = format_table(ordered, ks)
    txt_path.write_text(table, encoding="utf-8")
    _write_meta(ctx, [csv_path, txt_path], "report", "", {p.name: p for p in paths}, {"sorted_by": key})
    sys.stdout.write(table)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def _global_flags(defaults: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so they may
    # appear on either side of the subcommand name
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=d(None), help="base seed (overrides the config)")
    p.add_argument("--workers", type=int, default=d(os.cpu_count() or 1), help="worker threads")
    p.add_argument("--out-dir", default=d("out"), help="artifact directory")
    p.add_argument("--set", dest="overrides", action="append", default=d([]), metavar="KEY=VALUE",
                   help="override a config key, e.g. models.sknn.m_neighbors=50")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqrec", parents=[_global_flags(True)],
                                     description="LLM-assisted sequential recommendation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(False)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    add("prepare-data", cmd_prepare_data, "filter, split and snapshot the interaction log")
    add("fetch-embeddings", cmd_fetch_embeddings, "embed every catalog item by name")
    add("fit-pca", cmd_fit_pca, "reduce item embeddings for BERT4Rec initialization")
    p = add("train", cmd_train, "train a model (BERT4Rec checkpoint or fine-tuning file)")
    p.add_argument("model", choices=MODELS)
    p.add_argument("--init", choices=INIT_MODES, default="random")
    p = add("evaluate", cmd_evaluate, "evaluate models on the test split")
    p.add_argument("models", nargs="+", choices=MODELS)
    p.add_argument("--init", choices=INIT_MODES, default="random")
    p = add("sweep", cmd_sweep, "hyperparameter search on temporal validation folds")
    p.add_argument("model", choices=MODELS)
    p.add_argument("--init", choices=INIT_MODES, default="random")
    add("ablate-permutation", cmd_ablate_permutation, "compare random, LLM and permuted LLM initialization")
    p = add("report", cmd_report, "merge per-model reports sorted by NDCG@20")
    p.add_argument("reports", nargs="*", help="report CSVs (default: <out-dir>/reports/*.csv)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = apply_overrides(cfg, overrides)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        ctx = Context(cfg, Path(args.out_dir), args.workers)
        ctx.out_dir.mkdir(parents=True, exist_ok=True)
        _save_resolved_config(ctx)
        return args.func(ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # anything else is a runtime failure with exit code 4
        logger.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
