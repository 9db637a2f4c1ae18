#!/usr/bin/env python3
"""A compact continual-indexing comparison: sequential fine-tuning forgets the
initial corpus, a frozen backbone with prompts does not, and the frozen
classifier alone underfits the new corpora.

Uses a reduced corpus so the whole script runs in well under a minute; the
full default benchmark lives behind the command line (see README)."""

import copy

from promptdsi import continual as cl
from promptdsi import data as dt
from promptdsi import encoder as enc
from promptdsi import prompts as pr
from promptdsi.metrics import cl_metrics

SPEC = dt.SyntheticSpec(vocab_size=300, num_topics=4, docs_initial=40,
                        docs_per_increment=8, num_increments=3,
                        entity_tokens_per_doc=2, body_len=40,
                        natural_queries_per_doc=5, pseudo_queries_per_doc=6,
                        terms_per_topic=16, common_terms=10, seed=2)
STRATEGIES = (cl.SEQ_FT, cl.FROZEN_CLS, cl.PROMPTDSI_L2P, cl.PROMPTDSI_TOPIC)

timeline = dt.generate_corpora(SPEC)
config = enc.EncoderConfig(vocab_size=SPEC.vocab_size, num_layers=3, dim=32,
                           num_heads=4, ff_dim=48, max_seq_len=16)


def plan_for(tag):
    return cl.TimestepPlan(strategy=tag,
                           d0=cl.PhaseSettings(epochs=16, lr=2e-3, batch_size=32),
                           cl=cl.PhaseSettings(epochs=5, lr=2e-3, batch_size=16),
                           pool_cfg=pr.PoolConfig(size=4, prompt_len=8),
                           num_topics=4, seed=2)


base = cl.build_model(config, 2, "float32")
cl.train_initial(base, cl.DataAccess(timeline), plan_for(cl.SEQ_FT))
print(f"base model trained on {SPEC.docs_initial} docs; "
      f"{SPEC.num_increments} increments of {SPEC.docs_per_increment} follow.\n")

header = f"{'strategy':18s} {'P[T][0]':>8s} {'drop':>7s} {'A_T':>6s} {'LA_T':>6s} {'F_T':>6s}"
print(header)
print("-" * len(header))
for tag in STRATEGIES:
    result = cl.run_schedule(plan_for(tag), timeline,
                             base_model=copy.deepcopy(base), dtype="float32")
    h10 = result.perf["hits@10"]
    t = h10.max_t
    vals = cl_metrics(h10, t)
    drop = h10.get(0, 0) - h10.get(t, 0)
    print(f"{tag:18s} {h10.get(t, 0):8.3f} {drop:7.3f} {vals['A_t']:6.3f} "
          f"{vals['LA_t']:6.3f} {vals['F_t']:6.3f}")

print("\nhigher P[T][0] = less forgetting of the initial corpus;")
print("higher A_T = better average performance on the new corpora.")
