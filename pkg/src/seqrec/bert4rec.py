"""Masked-item transformer (BERT4Rec) with optional LLM-embedding initialization.

Token layout: ``0`` is padding, item ``i`` is token ``i + 1`` and
``n_items + 1`` is the mask token. The output projection reuses the item
embedding table (the same :class:`~seqrec.autograd.Tensor`), so updates to
one are updates to the other.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Session
from .embeddings import EmbeddingMatrix
from .ranking import NotFittedError, RankedList, top_k

logger = logging.getLogger(__name__)

INIT_MODES = ("random", "llm-pca", "llm-pca-permuted")
PAD = 0
IGNORE = -100


@dataclass
class Bert4RecConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_len: int = 50
    mask_prob: float = 0.2
    dropout: float = 0.1
    lr: float = 1e-3
    warmup_steps: int = 100
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    init_mode: str = "random"
    perm_seed: int = 0
    # rescale PCA coordinates to this overall std before placing them; None keeps raw values
    pca_target_std: float | None = None
    last_item_augmentation: bool = True
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def truncated_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two std."""
    out = rng.normal(0.0, 1.0, size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.normal(0.0, 1.0, size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def mask_sequence(
    tokens: Sequence[int], p: float, rng: np.random.Generator, mask_token: int
) -> tuple[np.ndarray, np.ndarray]:
    """Replace each position by ``mask_token`` with probability ``p``.

    If no position is drawn, the last one is masked so every sample carries
    loss. Labels hold the original token at masked positions and ``-100``
    elsewhere.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot mask an empty sequence")
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in (0, 1)")
    masked = rng.random(tokens.size) < p
    if not masked.any():
        masked[-1] = True
    inputs = np.where(masked, mask_token, tokens)
    labels = np.where(masked, tokens, IGNORE)
    return inputs, labels


def mask_last(tokens: Sequence[int], mask_token: int) -> tuple[np.ndarray, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    inputs = tokens.copy()
    inputs[-1] = mask_token
    labels = np.full_like(tokens, IGNORE)
    labels[-1] = tokens[-1]
    return inputs, labels


class Bert4Rec:
    """BERT4Rec next-item recommender.

    Attributes:
        config: Hyperparameters.
        n_items: Catalog size; the vocabulary has ``n_items + 2`` tokens.
        params: Named parameter tensors; ``params["item_emb"]`` doubles as
            the output projection.
        loss_curve: Mean training loss per epoch, filled by :meth:`fit`.
    """

    def __init__(
        self,
        n_items: int,
        config: Bert4RecConfig | None = None,
        reduced_embeddings: EmbeddingMatrix | None = None,
        dtype=np.float32,
    ):
        self.config = config = config or Bert4RecConfig()
        config.validate()
        self.n_items = n_items
        self.mask_token = n_items + 1
        self.dtype = np.dtype(dtype)
        self.fitted = False
        self.loss_curve: list[float] = []
        self.params = self._init_params(make_rng_for(config.seed, "init"))
        init_item_embeddings(self, config.init_mode, reduced_embeddings, config.perm_seed, config.pca_target_std)

    # -- parameters ------------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c, dt = self.config, self.dtype
        d, ff = c.d_model, 4 * c.d_model

        def w(*shape):
            return truncated_normal(rng, shape, c.init_std, dt)

        p: dict[str, np.ndarray] = {
            "item_emb": w(self.n_items + 2, d),
            "pos_emb": w(c.max_len, d),
            "emb_ln_g": np.ones(d, dt),
            "emb_ln_b": np.zeros(d, dt),
        }
        for i in range(c.n_layers):
            for name in ("q", "k", "v", "o"):
                p[f"l{i}_w{name}"] = w(d, d)
                p[f"l{i}_b{name}"] = np.zeros(d, dt)
            p[f"l{i}_ln1_g"] = np.ones(d, dt)
            p[f"l{i}_ln1_b"] = np.zeros(d, dt)
            p[f"l{i}_w1"] = w(d, ff)
            p[f"l{i}_b1"] = np.zeros(ff, dt)
            p[f"l{i}_w2"] = w(ff, d)
            p[f"l{i}_b2"] = np.zeros(d, dt)
            p[f"l{i}_ln2_g"] = np.ones(d, dt)
            p[f"l{i}_ln2_b"] = np.zeros(d, dt)
        p["out_bias"] = np.zeros(self.n_items + 2, dt)
        return {name: Tensor(arr, requires_grad=True, dtype=dt, name=name) for name, arr in p.items()}

    @property
    def item_embeddings(self) -> Tensor:
        return self.params["item_emb"]

    @property
    def projection(self) -> Tensor:
        """Output projection weight: the item embedding table itself."""
        return self.params["item_emb"]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- forward ---------------------------------------------------------------

    def encode(self, tokens: np.ndarray, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Hidden states of shape ``(batch, length, d_model)`` for left-padded tokens."""
        c, p = self.config, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        if L > c.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {c.max_len}")
        H, dh = c.n_heads, c.d_model // c.n_heads
        rate = c.dropout if train else 0.0

        # positions are right-aligned so the newest item always sees the last position row
        pos = ag.embedding_gather(p["pos_emb"], np.arange(c.max_len - L, c.max_len))
        x = ag.add(ag.embedding_gather(p["item_emb"], tokens), pos)
        x = ag.dropout(ag.layer_norm(x, p["emb_ln_g"], p["emb_ln_b"]), rate, rng, train)
        key_mask = np.where(tokens == PAD, -1e9, 0.0).astype(self.dtype)[:, None, None, :]

        def heads(t: Tensor) -> Tensor:
            return ag.transpose(ag.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        for i in range(c.n_layers):
            q = heads(ag.add(ag.matmul(x, p[f"l{i}_wq"]), p[f"l{i}_bq"]))
            k = heads(ag.add(ag.matmul(x, p[f"l{i}_wk"]), p[f"l{i}_bk"]))
            v = heads(ag.add(ag.matmul(x, p[f"l{i}_wv"]), p[f"l{i}_bv"]))
            scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dh))
            attn = ag.dropout(ag.softmax(ag.add_constant(scores, key_mask)), rate, rng, train)
            ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (B, L, c.d_model))
            out = ag.add(ag.matmul(ctx, p[f"l{i}_wo"]), p[f"l{i}_bo"])
            x = ag.layer_norm(ag.add(x, ag.dropout(out, rate, rng, train)), p[f"l{i}_ln1_g"], p[f"l{i}_ln1_b"])
            hidden = ag.gelu(ag.add(ag.matmul(x, p[f"l{i}_w1"]), p[f"l{i}_b1"]))
            ffn = ag.add(ag.matmul(hidden, p[f"l{i}_w2"]), p[f"l{i}_b2"])
            x = ag.layer_norm(ag.add(x, ag.dropout(ffn, rate, rng, train)), p[f"l{i}_ln2_g"], p[f"l{i}_ln2_b"])
        return x

    def logits_at(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        """Vocabulary logits for the flattened hidden rows ``rows``."""
        B, L, d = hidden.shape
        selected = ag.embedding_gather(ag.reshape(hidden, (B * L, d)), rows)
        return ag.add(ag.matmul(selected, ag.transpose(self.projection)), self.params["out_bias"])

    def loss(self, inputs: np.ndarray, labels: np.ndarray, train: bool = True, rng=None) -> Tensor:
        """Cross-entropy over masked positions of a batch."""
        hidden = self.encode(inputs, train=train, rng=rng)
        flat = np.asarray(labels).reshape(-1)
        rows = np.flatnonzero(flat != IGNORE)
        if rows.size == 0:
            rows = np.zeros(1, dtype=np.int64)
            return ag.cross_entropy(self.logits_at(hidden, rows), np.full(1, IGNORE))
        return ag.cross_entropy(self.logits_at(hidden, rows), flat[rows], ignore_index=IGNORE)

    # -- training --------------------------------------------------------------

    def _tokens(self, items: Sequence[int]) -> np.ndarray:
        return np.asarray(items[-self.config.max_len:], dtype=np.int64) + 1

    def _batches(self, sequences: list[np.ndarray], rng: np.random.Generator):
        c = self.config
        samples = [mask_sequence(seq, c.mask_prob, rng, self.mask_token) for seq in sequences]
        if c.last_item_augmentation:
            samples += [mask_last(seq, self.mask_token) for seq in sequences]
        order = rng.permutation(len(samples))
        for start in range(0, len(order), c.batch_size):
            chunk = [samples[i] for i in order[start:start + c.batch_size]]
            yield _pad_batch([s[0] for s in chunk], PAD), _pad_batch([s[1] for s in chunk], IGNORE)

    def fit(self, train: Sequence[Session], epochs: int | None = None) -> "Bert4Rec":
        """Train with masked-item prediction on the train sessions.

        Sequences keep their most recent ``max_len`` items. Adam with a
        linear learning-rate warmup; the mean loss of every epoch is appended
        to :attr:`loss_curve`.
        """
        c = self.config
        epochs = c.epochs if epochs is None else epochs
        sequences = [self._tokens(s.items) for s in train if len(s.items) >= 1]
        if not sequences:
            raise ValueError("no training sequences")
        rng = make_rng_for(c.seed, "train")
        opt = ag.Adam(self.params, lr=c.lr)
        step = 0
        for epoch in range(epochs):
            total, n_batches = 0.0, 0
            for b, (inputs, labels) in enumerate(self._batches(sequences, rng)):
                step += 1
                lr = c.lr * min(1.0, step / c.warmup_steps) if c.warmup_steps else c.lr
                with ag.Tape() as tape:
                    loss = self.loss(inputs, labels, train=True, rng=rng)
                    value = loss.item()
                    if not math.isfinite(value):
                        raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
                    tape.backward(loss)
                opt.step(lr)
                opt.zero_grad()
                total += value
                n_batches += 1
            self.loss_curve.append(total / n_batches)
            logger.debug("epoch %d loss %.4f", epoch, self.loss_curve[-1])
        self.fitted = True
        return self

    # -- inference -------------------------------------------------------------

    def predict_proba(self, prompts: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-item distribution over the catalog for each prompt, shape ``(n, n_items)``."""
        if not self.fitted:
            raise NotFittedError("Bert4Rec must be fitted before predicting")
        keep = self.config.max_len - 1
        seqs = []
        for prompt in prompts:
            if len(prompt) == 0:
                raise ValueError("empty prompt")
            seqs.append(np.append(np.asarray(prompt[-keep:], dtype=np.int64) + 1, self.mask_token))
        tokens = _pad_batch(seqs, PAD)
        hidden = self.encode(tokens, train=False)
        last = hidden.data[:, -1, :]
        emb = self.params["item_emb"].data[1:self.n_items + 1]
        logits = (last @ emb.T + self.params["out_bias"].data[1:self.n_items + 1]).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        return probs / probs.sum(axis=1, keepdims=True)

    def recommend(self, prompt: Sequence[int], k: int) -> RankedList:
        return top_k(self.predict_proba([prompt])[0], k)

    def recommend_batch(self, prompts: Sequence[Sequence[int]], k: int, batch_size: int = 256) -> list[RankedList]:
        out = []
        for start in range(0, len(prompts), batch_size):
            probs = self.predict_proba(prompts[start:start + batch_size])
            out.extend(top_k(row, k) for row in probs)
        return out

    # -- persistence -----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        """Checkpoint plus a JSON sidecar (``<path>.json``) echoing the config."""
        path = Path(path)
        ag.save_checkpoint(path, self.state_dict())
        meta = {
            "config": asdict(self.config),
            "n_items": self.n_items,
            "vocab_size": self.n_items + 2,
            "init_mode": self.config.init_mode,
            "seed": self.config.seed,
            "perm_seed": self.config.perm_seed,
            "loss_curve": self.loss_curve,
        }
        meta.update(metadata or {})
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Bert4Rec":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        config = Bert4RecConfig(**meta["config"])
        model = cls.__new__(cls)
        model.config = config
        model.n_items = meta["n_items"]
        model.mask_token = model.n_items + 1
        model.dtype = np.dtype(np.float32)
        model.loss_curve = list(meta.get("loss_curve", []))
        state = ag.load_checkpoint(path)
        model.params = {n: Tensor(a, requires_grad=True, name=n) for n, a in state.items()}
        model.fitted = True
        return model


def _pad_batch(seqs: Sequence[np.ndarray], fill: int) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), fill, dtype=np.int64)
    for row, s in enumerate(seqs):
        out[row, width - len(s):] = s
    return out


_STREAMS = {"init": 1, "train": 2, "perm": 3}


def make_rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator per purpose so e.g. changing epochs never shifts the init."""
    return ag.make_rng([int(seed), _STREAMS[stream]])


def permutation_for(n_items: int, perm_seed: int) -> np.ndarray:
    """Uniform random permutation of item indices (fixed points allowed)."""
    return make_rng_for(perm_seed, "perm").permutation(n_items)


def init_item_embeddings(
    model: Bert4Rec,
    mode: str,
    reduced: EmbeddingMatrix | None = None,
    perm_seed: int = 0,
    target_std: float | None = None,
) -> Bert4Rec:
    """Place item embedding rows according to ``mode``.

    ``random`` keeps the truncated-normal init. ``llm-pca`` gives item
    token ``i + 1`` the reduced row ``i``; ``llm-pca-permuted`` gives it row
    ``perm[i]`` for a seeded permutation. Padding and mask rows stay random.
    """
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}")
    if mode == "random":
        return model
    if reduced is None:
        raise ValueError(f"init mode {mode!r} needs a reduced embedding matrix")
    d = model.config.d_model
    if reduced.dim != d or reduced.n_items != model.n_items:
        raise ValueError(
            f"reduced embeddings are {reduced.n_items}x{reduced.dim}, model needs {model.n_items}x{d}"
        )
    rows = np.asarray(reduced.data, dtype=np.float64)
    if target_std is not None:
        std = rows.std()
        if std > 0:
            rows = rows * (target_std / std)
    if mode == "llm-pca-permuted":
        rows = rows[permutation_for(model.n_items, perm_seed)]
    model.params["item_emb"].data[1:model.n_items + 1] = rows.astype(model.dtype)
    return model
