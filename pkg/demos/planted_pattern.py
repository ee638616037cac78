"""Walkthrough: baselines and BERT4Rec initializations on a planted Markov catalog.

Run with ``python demos/planted_pattern.py``. Takes about a minute on one CPU.
"""

import numpy as np

from seqrec.bert4rec import Bert4Rec, Bert4RecConfig
from seqrec.data import leave_one_out
from seqrec.embeddings import fit_pca, project
from seqrec.llmseqsim import LLMSeqSim
from seqrec.metrics import evaluate, format_table
from seqrec.neighbors import MostPopular, PopularityTable, SessionKNN
from seqrec.synthetic import make_planted_dataset

# %% Sessions follow item-to-item transitions that mostly stay inside a category;
# the item embeddings are noisy category centroids, playing the role of LLM embeddings.
planted = make_planted_dataset(seed=0)
ds = planted.dataset
pairs = leave_one_out(ds.test)
popularity = PopularityTable.from_sessions(ds.train, ds.n_items)
print(f"{len(ds.train)} train sessions, {len(pairs)} test prompts, {ds.n_items} items")

# %% Non-neural baselines
reports = [
    evaluate(MostPopular(ds.n_items).fit(ds.train), pairs, popularity, ks=(10, 20), model="MostPopular"),
    evaluate(SessionKNN(m_neighbors=100, variant="vsknn", n_items=ds.n_items).fit(ds.train), pairs, popularity,
             ks=(10, 20), model="V_SKNN"),
    evaluate(LLMSeqSim(planted.embeddings, "last", "cosine", exclude_seen=True), pairs, popularity,
             ks=(10, 20), model="LLMSeqSim"),
]

# %% BERT4Rec with three item-embedding initializations.
# The PCA-reduced embeddings seed the item table; the permuted variant shuffles rows
# so the values are kept but the item alignment is destroyed.
reduced = project(fit_pca(planted.embeddings, 32), planted.embeddings)
for mode in ("random", "llm-pca", "llm-pca-permuted"):
    cfg = Bert4RecConfig(d_model=32, n_layers=1, n_heads=2, max_len=12, epochs=4, batch_size=128, lr=2e-3,
                         warmup_steps=50, pca_target_std=0.02, init_mode=mode, seed=0)
    model = Bert4Rec(ds.n_items, cfg, reduced).fit(ds.train)
    print(mode, "loss per epoch", np.round(model.loss_curve, 2))
    reports.append(evaluate(model, pairs, popularity, ks=(10, 20), model=f"BERT4Rec[{mode}]"))

print(format_table(reports, ks=(10, 20)))
