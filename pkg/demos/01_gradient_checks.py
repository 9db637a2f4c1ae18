#!/usr/bin/env python3
"""Verify the analytic gradients of the whole model against central finite
differences, for each training configuration the continual schedule uses.

Everything runs in float64; each row reports the worst relative error over a
sample of coordinates of every trainable tensor.
"""

import numpy as np

from promptdsi import encoder as enc
from promptdsi import prompts as pr
from promptdsi import retrieval as rt
from promptdsi.numerics import check_gradients
from promptdsi.seeding import named_rng


def build_model(strategy, t, selection_mode=enc.SINGLE_PASS, seed=3):
    cfg = enc.EncoderConfig(vocab_size=40, num_layers=3, dim=16, num_heads=2,
                            ff_dim=24, max_seq_len=10, prompt_layers=(2,),
                            selection_mode=selection_mode)
    rng = named_rng(seed, "init")
    model = rt.DsiModel(encoder=enc.EncoderState.init(cfg, rng, np.float64),
                        classifier=rt.Classifier.empty(cfg.dim),
                        registry=rt.DocidRegistry())
    model.registry.add_corpus([f"d{i}" for i in range(6)])
    rt.expand_classifier(model.classifier, 6, rng)
    if t > 0:
        model.registry.add_corpus([f"n{i}" for i in range(4)])
        rt.expand_classifier(model.classifier, 4, rng)
        model.classifier.frozen[0] = True
        model.encoder.frozen = True
        if strategy is not None:
            pool_cfg = pr.PoolConfig(size=4, prompt_len=6, top_n=2,
                                     coda_prompts_per_task=2, coda_prompt_len=4)
            pool, topic_keys = None, None
            if strategy == pr.TOPIC:
                k = named_rng(seed, "topics").standard_normal((3, cfg.dim))
                topic_keys = k / np.linalg.norm(k, axis=1, keepdims=True)
            for tt in range(1, t + 1):
                pool = pr.allocate_for_timestep(pool, strategy, tt, pool_cfg, cfg.dim, 1,
                                                rng, np.float64, topic_keys=topic_keys)
            # evaluate the check away from the tiny-init regime
            pool.prompts[:] = rng.uniform(-0.8, 0.8, size=pool.prompts.shape)
            if strategy in (pr.L2P, pr.TOPIC):
                pool.top_n = pool.size
            model.pool = pool
    model.classifier.weights[:] = rng.normal(0.0, 0.4, size=model.classifier.weights.shape)
    return model


def check(strategy, t, mode=enc.SINGLE_PASS, forced=None):
    model = build_model(strategy, t, mode)
    rng = named_rng(7, "queries")
    batch = [([enc.CLS_ID] + list(rng.integers(1, 40, size=4)),
              int(rng.integers(0, model.classifier.total))) for _ in range(4)]
    plan = rt.default_plan(model, t)
    fixed = None
    if model.pool is not None and strategy != pr.CODA:
        ids = np.asarray([q for q, _ in batch], dtype=np.intp)
        _, ctx = rt._forward_group(model, ids, True, forced_ids=forced)
        fixed = ctx["sel_ids"]
    loss, grads = rt.dsi_loss(batch, model, strategy, t, plan=plan,
                              forced_ids=forced, fixed_selections=fixed)
    params = {k: v for k, v in model.trainable_params(plan).items() if k in grads}
    report = check_gradients(
        lambda: rt.loss_only(batch, model, strategy, t, plan=plan,
                             forced_ids=forced, fixed_selections=fixed),
        params, grads, max_entries=32, seed=1, masks=plan.masks(model))
    name, err = report.worst()
    label = strategy or ("initial training" if t == 0 else "new columns only")
    print(f"  {label:22s} t={t}  loss={loss:6.3f}  entries={report.entries_checked:4d}  "
          f"max rel err={report.max_rel_err:.2e}  (worst: {name})")


if __name__ == "__main__":
    print("gradient checks (analytic vs central differences, eps=1e-5):")
    check(None, 0)
    check(None, 1)
    check(pr.L2P, 1)
    check(pr.L2P, 2, mode=enc.TWO_PASS)
    check(pr.SPP, 2, forced=[1])
    check(pr.CODA, 2)
    check(pr.TOPIC, 1)
    print("all paths verified.")
