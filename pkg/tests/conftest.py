"""Shared fixtures: gradient-check models, a small fast corpus, and the
session-scoped three-seed benchmark that the acceptance tests consume."""

import copy
import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from promptdsi import continual as cl
from promptdsi import data as dt
from promptdsi import encoder as enc
from promptdsi import prompts as pr
from promptdsi import retrieval as rt
from promptdsi.metrics import cl_metrics
from promptdsi.prompts import utilization_stats
from promptdsi.seeding import named_rng

# ---------------------------------------------------------------------------
# gradient-check models (float64, magnitudes away from the FD noise floor)
# ---------------------------------------------------------------------------


def make_check_model(strategy=None, t=0, selection_mode=enc.SINGLE_PASS, seed=3,
                     dim=16, num_layers=3, heads=2, ff=24, span_pool=True):
    cfg = enc.EncoderConfig(vocab_size=40, num_layers=num_layers, dim=dim,
                            num_heads=heads, ff_dim=ff, max_seq_len=10,
                            prompt_layers=(2,), selection_mode=selection_mode)
    rng = named_rng(seed, "init")
    state = enc.EncoderState.init(cfg, rng, np.float64)
    model = rt.DsiModel(encoder=state, classifier=rt.Classifier.empty(cfg.dim),
                        registry=rt.DocidRegistry())
    model.registry.add_corpus([f"d{i}" for i in range(6)])
    rt.expand_classifier(model.classifier, 6, rng)
    if t > 0:
        model.registry.add_corpus([f"n{i}" for i in range(4)])
        rt.expand_classifier(model.classifier, 4, rng)
        model.classifier.frozen[0] = True
        model.encoder.frozen = True
        if strategy is not None:
            pcfg = pr.PoolConfig(size=4, prompt_len=6, top_n=2,
                                 coda_prompts_per_task=2, coda_prompt_len=4)
            pool = None
            for tt in range(1, t + 1):
                tk = None
                if strategy == pr.TOPIC:
                    k = named_rng(seed, "topics").standard_normal((3, cfg.dim))
                    tk = k / np.linalg.norm(k, axis=1, keepdims=True)
                pool = pr.allocate_for_timestep(pool, strategy, tt, pcfg, cfg.dim, 1,
                                                rng, np.float64, topic_keys=tk)
            # mid-training-like magnitudes keep true gradients well above the
            # central-difference noise floor
            pool.prompts[:] = rng.uniform(-0.8, 0.8, size=pool.prompts.shape)
            if span_pool and strategy in (pr.L2P, pr.TOPIC):
                pool.top_n = pool.size
            model.pool = pool
    model.classifier.weights[:] = rng.normal(0.0, 0.4, size=model.classifier.weights.shape)
    return model


def make_check_batch(model, seed=7, n_q=4, length=5):
    rng = named_rng(seed, "queries")
    batch = []
    for _ in range(n_q):
        toks = [enc.CLS_ID] + list(rng.integers(1, model.encoder.config.vocab_size,
                                                 size=length - 1))
        batch.append((toks, int(rng.integers(0, model.classifier.total))))
    return batch


def pinned_selection(model, batch, forced_ids=None):
    """Selections computed once so finite differences stay on one branch."""
    if model.pool is None or model.pool.strategy == pr.CODA:
        return None
    ids = np.asarray([q for q, _ in batch], dtype=np.intp)
    _, ctx = rt._forward_group(model, ids, True, forced_ids=forced_ids)
    return ctx["sel_ids"]


# ---------------------------------------------------------------------------
# small fast corpus for e2e unit tests
# ---------------------------------------------------------------------------

SMALL_SPEC = dt.SyntheticSpec(
    vocab_size=256, num_topics=3, docs_initial=24, docs_per_increment=6,
    num_increments=2, entity_tokens_per_doc=2, body_len=30,
    natural_queries_per_doc=5, pseudo_queries_per_doc=4,
    terms_per_topic=12, common_terms=8, seed=11,
)

SMALL_ENCODER = dict(num_layers=3, dim=32, num_heads=4, ff_dim=48,
                     max_seq_len=16, prompt_layers=(2,))


def small_encoder_config(selection_mode=enc.SINGLE_PASS):
    return enc.EncoderConfig(vocab_size=SMALL_SPEC.vocab_size,
                             selection_mode=selection_mode, **SMALL_ENCODER)


def small_plan(strategy, seed=11, cl_epochs=4, d0_epochs=14):
    return cl.TimestepPlan(
        strategy=strategy,
        d0=cl.PhaseSettings(epochs=d0_epochs, lr=2e-3, batch_size=32),
        cl=cl.PhaseSettings(epochs=cl_epochs, lr=1e-3, batch_size=16),
        pool_cfg=pr.PoolConfig(size=4, prompt_len=8, top_n=1,
                               coda_prompts_per_task=2, coda_prompt_len=6),
        num_topics=3,
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_timeline():
    return dt.generate_corpora(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_base(small_timeline):
    """One small trained base model; tests deep-copy it before mutating."""
    plan = small_plan(cl.SEQ_FT)
    model = cl.build_model(small_encoder_config(), plan.seed, "float32")
    access = cl.DataAccess(small_timeline)
    cl.train_initial(model, access, plan)
    return model


def clone(model):
    return copy.deepcopy(model)


# ---------------------------------------------------------------------------
# the default three-seed benchmark (shared by the acceptance tests)
# ---------------------------------------------------------------------------

BENCH_SEEDS = (0, 1, 2)
BENCH_TAGS = (
    cl.SEQ_FT, cl.REPLAY_FT, cl.FROZEN_CLS,
    cl.PROMPTDSI_L2P, cl.PROMPTDSI_SPP, cl.PROMPTDSI_CODA, cl.PROMPTDSI_TOPIC,
    cl.NAIVE_PROMPTDSI_L2P,
)


@dataclass
class BenchRun:
    perf: dict
    p00: float
    pT0: float
    a5: float
    invocations: int
    wall_s: float
    audit_ok: bool
    encoder_digest_before: str
    encoder_digest_after: str
    seg0_digest_before: str
    seg0_digest_after: str
    util_above: int | None = None
    util_fraction: float | None = None
    probe_scores_before: np.ndarray | None = None
    probe_scores_after: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _default_plan(tag, seed):
    from promptdsi import cli

    cfg = cli.load_config(None, {"strategy": tag, "seed": seed})
    return cli.timestep_plan(cfg)


def _d0_probe_scores(model, timeline):
    """Scores of every D_0 test query against the D_0 columns (computed over
    a contiguous copy of the segment so layout cannot perturb the bits)."""
    queries = timeline.corpus(0).queries_of(dt.TEST)
    hs = rt.encode_queries(model, [enc.prepend_cls(q.tokens) for q in queries],
                           use_prompts=model.pool is not None)
    start, end = model.classifier.segments[0]
    return hs @ np.ascontiguousarray(model.classifier.weights[:, start:end])


@pytest.fixture(scope="session")
def benchmark():
    """Default-scale benchmark: 200 + 5x20 docs, all strategies, 3 seeds."""
    from promptdsi import cli

    wall_start = time.perf_counter()
    runs: dict[tuple[str, int], BenchRun] = {}
    spp_freeze_trace = None
    train_hits1 = {}
    for seed in BENCH_SEEDS:
        cfg = cli.load_config(None, {"seed": seed})
        timeline = dt.generate_corpora(cli.synthetic_spec(cfg))
        ecfg = cli.encoder_config(cfg, cli.vocab_size_for(cfg, timeline))
        base = cl.build_model(ecfg, seed, "float32")
        cl.train_initial(base, cl.DataAccess(timeline), _default_plan(cl.SEQ_FT, seed))
        fit = cl.evaluate_corpus(base, timeline.corpus(0).queries_of(dt.TRAIN))
        assert fit["hits@1"] >= 0.95, f"seed {seed}: initial corpus underfit ({fit})"
        train_hits1[seed] = fit["hits@1"]
        for tag in BENCH_TAGS:
            model = clone(base)
            model.encoder.frozen = cl.freezes_encoder(tag)
            enc_before = model.encoder.digest()
            seg0_before = model.classifier.segment_digest(0)
            probe_before = _d0_probe_scores(model, timeline) if tag == cl.FROZEN_CLS else None
            plan = _default_plan(tag, seed)
            result = cl.run_schedule(plan, timeline, base_model=model, dtype="float32")
            h10 = result.perf["hits@10"]
            big_t = h10.max_t
            a5 = cl_metrics(h10, big_t)["A_t"]
            run = BenchRun(
                perf=result.perf,
                p00=h10.get(0, 0), pT0=h10.get(big_t, 0), a5=a5,
                invocations=result.continual_invocations,
                wall_s=result.continual_wall_s,
                audit_ok=result.audit_ok,
                encoder_digest_before=enc_before,
                encoder_digest_after=result.model.encoder.digest(),
                seg0_digest_before=seg0_before,
                seg0_digest_after=result.model.classifier.segment_digest(0),
            )
            if result.model.pool is not None and result.selection_log:
                stats = utilization_stats(result.selection_log, result.model.pool.size)
                run.util_above = stats.above_uniform
                run.util_fraction = stats.selected_fraction
            if tag == cl.FROZEN_CLS:
                run.probe_scores_before = probe_before
                run.probe_scores_after = _d0_probe_scores(result.model, timeline)
            run.extras["reports"] = result.reports
            runs[(tag, seed)] = run
        if seed == BENCH_SEEDS[0]:
            spp_freeze_trace = _stepped_spp_freeze_trace(clone(base), timeline, seed)
    return {
        "runs": runs,
        "seeds": BENCH_SEEDS,
        "tags": BENCH_TAGS,
        "wall_s": time.perf_counter() - wall_start,
        "spp_freeze_trace": spp_freeze_trace,
        "train_hits1": train_hits1,
    }


def _stepped_spp_freeze_trace(base, timeline, seed):
    """Manually stepped SPP run that records each tensor's digest at the
    moment it freezes, for end-of-run comparison."""
    model = base
    model.encoder.frozen = True
    plan = _default_plan(cl.PROMPTDSI_SPP, seed)
    access = cl.DataAccess(timeline)
    aux = cl.StrategyAux()
    frozen_at: dict[str, str] = {"encoder": model.encoder.digest(),
                                 "classifier.segment0": model.classifier.segment_digest(0)}
    t_max = timeline.num_timesteps - 1
    for t in range(1, t_max + 1):
        cl.continual_index_step(model, access, t, plan, aux)
        for s, is_frozen in enumerate(model.classifier.frozen):
            key = f"classifier.segment{s}"
            if is_frozen and key not in frozen_at:
                frozen_at[key] = model.classifier.segment_digest(s)
        if model.pool is not None:
            digests = model.pool.entry_digests()
            for i in range(model.pool.size):
                key = f"pool.entry{i}"
                if model.pool.frozen[i] and key not in frozen_at:
                    frozen_at[key] = digests[i]
    final = {"encoder": model.encoder.digest(),
             "classifier.segment0": model.classifier.segment_digest(0)}
    for s, is_frozen in enumerate(model.classifier.frozen):
        if is_frozen:
            final[f"classifier.segment{s}"] = model.classifier.segment_digest(s)
    digests = model.pool.entry_digests()
    for i in range(model.pool.size):
        if model.pool.frozen[i]:
            final[f"pool.entry{i}"] = digests[i]
    return {"frozen_at": frozen_at, "final": final}
