"""Interaction logs, item catalogs, p-core filtering and temporal splits."""

from __future__ import annotations

import ast
import csv
import gzip
import io
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

CSV_FIELDS = ("session_id", "item_id", "item_name", "timestamp")
FORMATS = ("csv", "amazon-reviews-jsonl")


class DataError(ValueError):
    """Input data that cannot be turned into a dataset."""


@dataclass(frozen=True, slots=True)
class Item:
    index: int
    external_id: str
    name: str


@dataclass(frozen=True, slots=True)
class Interaction:
    session_id: str
    item: int
    timestamp: int
    user_id: str | None = None


@dataclass(frozen=True, slots=True)
class Session:
    """Ordered interactions of one session; ``items[i]`` happened at ``timestamps[i]``."""

    id: str
    items: tuple[int, ...]
    timestamps: tuple[int, ...]

    def __post_init__(self):
        if not self.items:
            raise DataError(f"session {self.id!r} is empty")
        if len(self.items) != len(self.timestamps):
            raise DataError(f"session {self.id!r}: items and timestamps differ in length")

    @property
    def start_time(self) -> int:
        return self.timestamps[0]

    @property
    def end_time(self) -> int:
        return self.timestamps[-1]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True, slots=True)
class PromptTarget:
    prompt: tuple[int, ...]
    target: int


@dataclass(frozen=True)
class Dataset:
    catalog: tuple[Item, ...]
    train: tuple[Session, ...]
    test: tuple[Session, ...]
    split_boundary: int

    @property
    def n_items(self) -> int:
        return len(self.catalog)

    def validate(self) -> None:
        """Check catalog contiguity, item references and temporal ordering."""
        for i, item in enumerate(self.catalog):
            if item.index != i:
                raise DataError(f"catalog index {item.index} at position {i}")
        n = self.n_items
        for s in self.train + self.test:
            if any(not 0 <= it < n for it in s.items):
                raise DataError(f"session {s.id!r} references an unknown item")
        if self.train and self.test:
            last_train = max((s.start_time, s.id) for s in self.train)
            first_test = min((s.start_time, s.id) for s in self.test)
            if not last_train < first_test:
                raise DataError("a train session starts after a test session")
            if not last_train[0] <= self.split_boundary <= first_test[0]:
                raise DataError("split boundary does not separate train and test")


@dataclass
class InteractionLog:
    """Parsed raw log: interactions index into ``catalog`` (not yet compacted)."""

    interactions: list[Interaction]
    catalog: list[Item]
    n_rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)

    @property
    def n_sessions(self) -> int:
        return len({it.session_id for it in self.interactions})


class _CatalogBuilder:
    def __init__(self):
        self.items: list[Item] = []
        self.by_id: dict[str, int] = {}

    def index_of(self, external_id: str, name: str) -> int:
        idx = self.by_id.get(external_id)
        if idx is None:
            idx = len(self.items)
            self.by_id[external_id] = idx
            self.items.append(Item(idx, external_id, name or external_id))
        elif name and self.items[idx].name == external_id and name != external_id:
            self.items[idx] = Item(idx, external_id, name)
        return idx


def _open_text(path: Path) -> io.TextIOBase:
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _parse_record(line: str) -> dict:
    try:
        return json.loads(line)
    except json.JSONDecodeError:
        # the 2014 Amazon dumps store python dict literals
        return ast.literal_eval(line)


def load_titles(path: str | Path) -> dict[str, str]:
    """Read ``asin -> title`` from an Amazon product-metadata dump."""
    titles: dict[str, str] = {}
    with _open_text(Path(path)) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                rec = _parse_record(line)
            except (ValueError, SyntaxError):
                continue
            asin, title = rec.get("asin"), rec.get("title")
            if asin and title:
                titles[str(asin)] = " ".join(str(title).split())
    return titles


def load_interactions(
    path: str | Path,
    format: str = "csv",
    titles: dict[str, str] | None = None,
) -> InteractionLog:
    """Parse an interaction file.

    ``csv`` expects the header ``session_id,item_id,item_name,timestamp``.
    ``amazon-reviews-jsonl`` reads one review per line (``reviewerID``,
    ``asin``, ``unixReviewTime`` and an optional ``title``); the reviewer
    becomes the session. ``titles`` optionally supplies product names for
    records without a title.

    The result is sorted by ``(session_id, timestamp)``, keeping file order
    for equal timestamps. Rows that fail validation are counted in
    ``n_rejected`` and logged.
    """
    path = Path(path)
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not path.is_file():
        raise DataError(f"cannot read {path}")
    titles = titles or {}
    catalog = _CatalogBuilder()
    rows: list[tuple[str, int, int, str | None]] = []
    rejected: list[int] = []

    with _open_text(path) as fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            missing = set(CSV_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise DataError(f"{path}: missing CSV columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                sid, iid = (row.get("session_id") or "").strip(), (row.get("item_id") or "").strip()
                name = (row.get("item_name") or "").strip()
                ts = _parse_timestamp(row.get("timestamp"))
                if not sid or not iid or ts is None:
                    rejected.append(lineno)
                    continue
                rows.append((sid, catalog.index_of(iid, name), ts, None))
        else:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = _parse_record(line)
                    user = str(rec["reviewerID"]).strip()
                    asin = str(rec["asin"]).strip()
                    ts = _parse_timestamp(rec.get("unixReviewTime"))
                except (ValueError, SyntaxError, KeyError, TypeError):
                    rejected.append(lineno)
                    continue
                if not user or not asin or ts is None:
                    rejected.append(lineno)
                    continue
                title = rec.get("title") or titles.get(asin) or ""
                rows.append((user, catalog.index_of(asin, " ".join(str(title).split())), ts, user))

    if rejected:
        logger.warning("%s: rejected %d malformed rows (first at line %d)", path, len(rejected), rejected[0])
    if not rows:
        raise DataError(f"{path}: no valid rows")
    order = sorted(range(len(rows)), key=lambda i: (rows[i][0], rows[i][2], i))
    interactions = [Interaction(rows[i][0], rows[i][1], rows[i][2], rows[i][3]) for i in order]
    return InteractionLog(interactions, catalog.items, len(rejected), rejected)


def _parse_timestamp(value) -> int | None:
    if value is None:
        return None
    try:
        text = str(value).strip()
        if not text:
            return None
        ts = int(float(text)) if any(c in text for c in ".eE") else int(text)
    except (TypeError, ValueError):
        return None
    return ts if ts >= 0 else None


def apply_p_core(interactions: Sequence[Interaction], p: int) -> list[Interaction]:
    """Keep the largest subset where every session and item has >= p interactions.

    Removal is repeated until nothing changes. The p-core is unique, so the
    result does not depend on removal order. Input order is preserved.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    alive = list(interactions)
    while True:
        users = Counter(it.session_id for it in alive)
        items = Counter(it.item for it in alive)
        kept = [it for it in alive if users[it.session_id] >= p and items[it.item] >= p]
        if len(kept) == len(alive):
            return kept
        alive = kept


def compact_catalog(
    interactions: Sequence[Interaction], catalog: Sequence[Item]
) -> tuple[list[Interaction], list[Item]]:
    """Drop unused items and renumber the rest 0..n-1 in first-seen catalog order."""
    used = sorted({it.item for it in interactions})
    remap = {old: new for new, old in enumerate(used)}
    new_catalog = [Item(remap[old], catalog[old].external_id, catalog[old].name) for old in used]
    new_interactions = [
        Interaction(it.session_id, remap[it.item], it.timestamp, it.user_id) for it in interactions
    ]
    return new_interactions, new_catalog


def build_sessions(interactions: Iterable[Interaction]) -> list[Session]:
    """Group interactions by session id; items ordered by timestamp, then input order."""
    grouped: dict[str, list[tuple[int, int, int]]] = defaultdict(list)
    for pos, it in enumerate(interactions):
        grouped[it.session_id].append((it.timestamp, pos, it.item))
    sessions = []
    for sid in sorted(grouped):
        events = sorted(grouped[sid])
        sessions.append(Session(sid, tuple(e[2] for e in events), tuple(e[0] for e in events)))
    return sessions


def temporal_split(
    sessions: Sequence[Session],
    test_fraction: float = 0.1,
    catalog: Sequence[Item] = (),
    drop_straddling: bool = False,
) -> Dataset:
    """Split sessions so every test session starts after every train session.

    Sessions are ordered by ``(start_time, id)`` and the most recent
    ``round(test_fraction * n)`` (at least one, at most ``n - 1``) form the
    test set. Sessions sharing the boundary timestamp are split by session id.
    ``drop_straddling`` removes train sessions whose last interaction is
    later than the boundary.
    """
    if len(sessions) < 2:
        raise DataError("temporal_split needs at least 2 sessions")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    ordered = sorted(sessions, key=lambda s: (s.start_time, s.id))
    n = len(ordered)
    n_test = min(n - 1, max(1, math.floor(test_fraction * n + 0.5)))
    train, test = ordered[: n - n_test], ordered[n - n_test:]
    boundary = test[0].start_time
    if drop_straddling:
        train = [s for s in train if s.end_time <= boundary]
    ds = Dataset(tuple(catalog), tuple(train), tuple(test), boundary)
    if catalog:
        ds.validate()
    return ds


def leave_one_out(test_sessions: Iterable[Session], min_len: int = 2) -> list[PromptTarget]:
    """All but the last item form the prompt; the last item is the target."""
    return [
        PromptTarget(s.items[:-1], s.items[-1])
        for s in test_sessions
        if len(s.items) >= max(min_len, 2)
    ]


@dataclass(frozen=True)
class DatasetStats:
    n_sessions: int
    n_items: int
    n_interactions: int

    @property
    def avg_length(self) -> float:
        return self.n_interactions / self.n_sessions if self.n_sessions else 0.0

    @property
    def density(self) -> float:
        """Fraction of the session x item matrix that is non-empty."""
        cells = self.n_sessions * self.n_items
        return self.n_interactions / cells if cells else 0.0


def dataset_stats(interactions: Sequence[Interaction]) -> DatasetStats:
    return DatasetStats(
        n_sessions=len({it.session_id for it in interactions}),
        n_items=len({it.item for it in interactions}),
        n_interactions=len(interactions),
    )


def prepare_dataset(
    log: InteractionLog,
    p_core: int | None = 5,
    test_fraction: float = 0.1,
) -> tuple[Dataset, DatasetStats]:
    """p-core filter (when ``p_core`` is set), compact the catalog, split temporally."""
    interactions = log.interactions
    if p_core:
        interactions = apply_p_core(interactions, p_core)
        if not interactions:
            raise DataError(f"p-core={p_core} removed every interaction")
    interactions, catalog = compact_catalog(interactions, log.catalog)
    stats = dataset_stats(interactions)
    sessions = build_sessions(interactions)
    return temporal_split(sessions, test_fraction, catalog), stats


# -- snapshots -----------------------------------------------------------------


def _write_csv(path: Path, rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        writer.writerows(rows)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    """Write ``catalog.csv``, ``train.csv`` and ``test.csv``.

    All three use the interaction CSV schema. Catalog rows leave
    ``session_id`` and ``timestamp`` empty and are listed in index order.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_csv(directory / "catalog.csv", (("", it.external_id, it.name, "") for it in ds.catalog))
    for split, sessions in (("train", ds.train), ("test", ds.test)):
        _write_csv(
            directory / f"{split}.csv",
            (
                (s.id, ds.catalog[item].external_id, ds.catalog[item].name, ts)
                for s in sessions
                for item, ts in zip(s.items, s.timestamps)
            ),
        )


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    for name in ("catalog.csv", "train.csv", "test.csv"):
        if not (directory / name).is_file():
            raise DataError(f"missing {directory / name}")
    with open(directory / "catalog.csv", encoding="utf-8", newline="") as fh:
        catalog = tuple(
            Item(i, row["item_id"], row["item_name"]) for i, row in enumerate(csv.DictReader(fh))
        )
    by_id = {it.external_id: it.index for it in catalog}
    splits = {}
    for split in ("train", "test"):
        grouped: dict[str, tuple[list[int], list[int]]] = {}
        with open(directory / f"{split}.csv", encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                items, stamps = grouped.setdefault(row["session_id"], ([], []))
                items.append(by_id[row["item_id"]])
                stamps.append(int(row["timestamp"]))
        splits[split] = tuple(Session(sid, tuple(i), tuple(t)) for sid, (i, t) in grouped.items())
    boundary = min(s.start_time for s in splits["test"]) if splits["test"] else 0
    ds = Dataset(catalog, splits["train"], splits["test"], boundary)
    ds.validate()
    return ds
