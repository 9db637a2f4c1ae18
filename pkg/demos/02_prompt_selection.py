#!/usr/bin/env python3
"""Prompt pool mechanics: top-N key matching against the exhaustive-subset
oracle, the matching loss, weighted composition, and allocation/freezing
under each strategy."""

import itertools

import numpy as np

from promptdsi import prompts as pr
from promptdsi.numerics import cosine_distance
from promptdsi.seeding import named_rng

rng = named_rng(0, "demo")

# -- top-N selection matches brute force over all N-subsets ------------------
m, n, dim = 6, 3, 4
keys = rng.normal(size=(m, dim))
pool = pr.PromptPool(strategy=pr.L2P, prompts=np.zeros((m, 1, 4, dim)), keys=keys,
                     attn=None, frozen=np.zeros(m, dtype=bool), top_n=n,
                     provenance=[pr.SHARED] * m)
h = rng.normal(size=dim)
sel = pr.select_topn(h, pool)
dists = [cosine_distance(h, k) for k in keys]
oracle = min(itertools.combinations(range(m), n),
             key=lambda s: (sum(dists[i] for i in s), s))
print(f"selected ids {sorted(sel.ids)}  oracle {sorted(oracle)}  "
      f"match loss {sel.match_loss:.4f}")
assert sorted(sel.ids) == sorted(oracle)

# -- weighted composition -----------------------------------------------------
cpool = pr.PromptPool(strategy=pr.CODA, prompts=rng.normal(size=(3, 1, 4, dim)),
                      keys=rng.normal(size=(3, dim)), attn=rng.normal(size=(3, dim)),
                      frozen=np.zeros(3, dtype=bool), top_n=1, provenance=[1, 1, 2])
composed, alpha = pr.coda_compose(h, cpool)
print(f"composition weights alpha = {np.round(alpha, 3)} (each in [-1, 1])")

# -- allocation policies ------------------------------------------------------
cfg = pr.PoolConfig(size=5, prompt_len=8, top_n=1, coda_prompts_per_task=2,
                    coda_prompt_len=6)
for strategy in (pr.L2P, pr.SPP, pr.CODA):
    p = None
    for t in range(1, 6):
        p = pr.allocate_for_timestep(p, strategy, t, cfg, dim, 1, named_rng(1, strategy))
    print(f"{strategy}: pool size {p.size}, frozen entries {int(p.frozen.sum())}")

topic_keys = rng.normal(size=(4, dim))
topic_keys /= np.linalg.norm(topic_keys, axis=1, keepdims=True)
p = pr.allocate_for_timestep(None, pr.TOPIC, 1, cfg, dim, 1, named_rng(2, "t"),
                             topic_keys=topic_keys)
print(f"TOPIC: pool size {p.size}, keys trainable: {p.keys_trainable}")

# -- utilization bookkeeping --------------------------------------------------
records = [pr.SelectionRecord(0, f"q{i}", (i % 2,), (0.1,)) for i in range(10)]
stats = pr.utilization_stats(records, pool_size=5)
print(f"utilization over a 2-prompt log: frequencies {stats.frequencies}, "
      f"above-uniform count {stats.above_uniform}, "
      f"selected fraction {stats.selected_fraction:.1f}")
