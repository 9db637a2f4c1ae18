#!/usr/bin/env python3
"""Mine topics from a synthetic corpus and inspect the cluster term labels.

Trains a small model on the initial corpus, embeds each document as the mean
of its train-query CLS vectors, clusters with k-means, and prints the
class-based TF-IDF terms per topic together with how test queries route."""

import numpy as np

from promptdsi import continual as cl
from promptdsi import data as dt
from promptdsi import encoder as enc
from promptdsi import prompts as pr
from promptdsi import topics as tp
from promptdsi import retrieval as rt

SPEC = dt.SyntheticSpec(vocab_size=256, num_topics=3, docs_initial=24,
                        docs_per_increment=6, num_increments=1,
                        entity_tokens_per_doc=2, body_len=30,
                        natural_queries_per_doc=5, pseudo_queries_per_doc=4,
                        terms_per_topic=12, common_terms=8, seed=4)

timeline = dt.generate_corpora(SPEC)
plan = cl.TimestepPlan(strategy=cl.PROMPTDSI_TOPIC,
                       d0=cl.PhaseSettings(epochs=12, lr=2e-3, batch_size=32),
                       cl=cl.PhaseSettings(epochs=4, lr=1e-3, batch_size=16),
                       pool_cfg=pr.PoolConfig(size=4, prompt_len=8),
                       num_topics=3, seed=4)
config = enc.EncoderConfig(vocab_size=SPEC.vocab_size, num_layers=3, dim=32,
                           num_heads=4, ff_dim=48, max_seq_len=16)
model = cl.build_model(config, plan.seed, "float32")
access = cl.DataAccess(timeline)
cl.train_initial(model, access, plan)
print("initial training done.")

topic_model = cl.mine_topic_model(model, access, plan)
print(f"mined {topic_model.num_topics} topics; k-means objective "
      f"{topic_model.objective_history[0]:.1f} -> {topic_model.objective_history[-1]:.1f} "
      f"over {len(topic_model.objective_history)} iterations")
for g, terms in enumerate(topic_model.top_terms):
    members = int((topic_model.assignments == g).sum())
    label = ", ".join(f"{t}:{s:.1f}" for t, s in terms[:5])
    print(f"  topic {g} ({members} docs): {label}")

# route the initial corpus' test queries through the fixed topic keys
keys = tp.topic_keys(topic_model)
pool = pr.PromptPool(strategy=pr.TOPIC, prompts=np.zeros((keys.shape[0], 1, 2, 32)),
                     keys=keys.astype(np.float32), attn=None,
                     frozen=np.zeros(keys.shape[0], dtype=bool), top_n=1,
                     provenance=list(range(keys.shape[0])))
counts = np.zeros(keys.shape[0], dtype=int)
for q in timeline.corpus(0).queries_of(dt.TEST):
    h = enc.avg_at_layer(enc.prepend_cls(q.tokens), model.encoder, layer=2)
    sel = pr.select_topn(h.astype(np.float64), pool)
    counts[sel.ids[0]] += 1
print(f"test-query routing counts per topic: {counts.tolist()}")
