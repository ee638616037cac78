"""Walkthrough: fine-tuning records and slate assembly for the prompt-based recommender.

Uses a scripted generator so no network access or API key is needed.
Run with ``python demos/prompt_slate.py``.
"""

import numpy as np

from seqrec.data import Item, Session
from seqrec.embeddings import EmbeddingMatrix, StaticProvider
from seqrec.llmseqprompt import LLMSeqPrompt, ScriptedBackend, build_finetune_dataset, format_prompt

# %% A toy catalog whose embeddings put the two shampoos and the two lotions close together
names = ["Rosewater Toner", "Argan Oil Shampoo", "Mint Shampoo", "Shea Body Lotion", "Aloe Body Lotion"]
catalog = [Item(i, f"P{i}", n) for i, n in enumerate(names)]
vectors = np.array([[1, 0, 0], [0, 1, 0.1], [0, 1, -0.1], [0, 0, 1], [0.1, 0, 1]], dtype=np.float32)
embeddings = EmbeddingMatrix(vectors, tuple(it.external_id for it in catalog))

# %% Each training session becomes one prompt/completion pair: history in, last item out
train = [Session("s1", (0, 1, 3), (1, 2, 3)), Session("s2", (2, 4), (4, 5))]
samples, n_skipped = build_finetune_dataset(train, catalog)
for s in samples:
    print(repr(s.prompt), "->", repr(s.completion))

# %% Generations are counted, hallucinated names are mapped to the nearest catalog item,
# and short slates are filled with neighbors of the top candidate.
prompt = [0, 1]
backend = ScriptedBackend({format_prompt([names[i] for i in prompt]): [
    " Shea Body Lotion ###", " Shea Body Lotion ###", " Mint Shampoo ###", " Rosewater Tonerr ###"]})
# the misspelled name is embedded on the fly; here a fixed vector close to the toner
provider = StaticProvider({"Rosewater Tonerr": [0.95, 0.05, 0.0]})
rec = LLMSeqPrompt(backend, catalog, embeddings, provider, n_samples=4)
slate = rec.recommend(prompt, 4)
print([names[i] for i in slate.items], np.round(slate.scores, 3))
print(rec.last_report)
