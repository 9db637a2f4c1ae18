"""Timestep orchestration: initial training, continual indexing, evaluation.

A schedule runs t = 0..T. Timestep 0 trains the full model on the initial
corpus. Every later timestep registers the increment's documents, expands the
classifier, applies the strategy's freeze policy, trains, then evaluates all
test sets seen so far into one row of the performance matrices.

Strategies:

* SEQ_FT           -- full-model fine-tuning on the new corpus only.
* REPLAY_FT        -- SEQ_FT plus sparse replay of stored past pseudo-queries.
* FROZEN_CLS       -- only the new classifier columns train.
* CACHED_CENTROID  -- new columns set to L2-normalized mean train-query
                      embeddings from a grow-only cache, then optionally
                      refined by gradient for a few epochs.
* PROMPTDSI_*      -- frozen backbone, prompt pool per strategy plus the new
                      columns; single-pass prompt selection.
* NAIVE_*          -- same objectives with two-pass selection.
* MULTI / JOINT    -- reference modes that train once on merged increments
                      (JOINT also replays the initial corpus' queries).
"""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data as dt
from . import encoder as enc
from . import prompts as pr
from . import retrieval as rt
from . import topics as tp
from .errors import ConfigError, ContractError
from .metrics import METRICS, PerfMatrix, cl_metrics, params_accounting
from .numerics import AdamW, resolve_dtype
from .seeding import named_rng

SEQ_FT = "SEQ_FT"
REPLAY_FT = "REPLAY_FT"
FROZEN_CLS = "FROZEN_CLS"
CACHED_CENTROID = "CACHED_CENTROID"
PROMPTDSI_L2P = "PROMPTDSI_L2P"
PROMPTDSI_SPP = "PROMPTDSI_SPP"
PROMPTDSI_CODA = "PROMPTDSI_CODA"
PROMPTDSI_TOPIC = "PROMPTDSI_TOPIC"
NAIVE_PROMPTDSI_L2P = "NAIVE_PROMPTDSI_L2P"
NAIVE_PROMPTDSI_SPP = "NAIVE_PROMPTDSI_SPP"
NAIVE_PROMPTDSI_CODA = "NAIVE_PROMPTDSI_CODA"
NAIVE_PROMPTDSI_TOPIC = "NAIVE_PROMPTDSI_TOPIC"
MULTI = "MULTI"
JOINT = "JOINT"

STRATEGY_TAGS = (
    SEQ_FT, REPLAY_FT, FROZEN_CLS, CACHED_CENTROID,
    PROMPTDSI_L2P, PROMPTDSI_SPP, PROMPTDSI_CODA, PROMPTDSI_TOPIC,
    NAIVE_PROMPTDSI_L2P, NAIVE_PROMPTDSI_SPP, NAIVE_PROMPTDSI_CODA,
    NAIVE_PROMPTDSI_TOPIC, MULTI, JOINT,
)


def is_promptdsi(tag: str) -> bool:
    return "PROMPTDSI" in tag


def is_naive(tag: str) -> bool:
    return tag.startswith("NAIVE_")


def pool_strategy_of(tag: str) -> str | None:
    for s in pr.STRATEGIES:
        if tag.endswith("_" + s):
            return s
    return None


def freezes_encoder(tag: str) -> bool:
    return tag in (FROZEN_CLS, CACHED_CENTROID) or is_promptdsi(tag)


@dataclass
class PhaseSettings:
    epochs: int
    lr: float
    batch_size: int
    weight_decay: float = 0.01

    def to_json(self):
        return dict(self.__dict__)


@dataclass
class TimestepPlan:
    strategy: str
    d0: PhaseSettings
    cl: PhaseSettings
    pool_cfg: pr.PoolConfig = field(default_factory=pr.PoolConfig)
    num_topics: int = 8
    promptdsi_epoch_mult: int = 2
    replay_every: int = 4           # one replay batch per this many new batches
    centroid_refine_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGY_TAGS:
            raise ConfigError(f"unknown strategy {self.strategy!r}")


@dataclass
class DataAccess:
    """Timeline wrapper that records which splits each phase touched."""

    timeline: dt.CorpusTimeline
    phase: str = "init"
    log: list[tuple[str, int, str]] = field(default_factory=list)

    @property
    def num_timesteps(self) -> int:
        return self.timeline.num_timesteps

    def docs(self, t: int) -> list[dt.DocRecord]:
        self.log.append((self.phase, t, "docs"))
        return self.timeline.corpus(t).docs

    def queries(self, t: int, split: str) -> list[dt.QueryRecord]:
        self.log.append((self.phase, t, split))
        return self.timeline.corpus(t).queries_of(split)

    def train_reads(self) -> list[tuple[str, int]]:
        return [(phase, t) for phase, t, split in self.log if split == dt.TRAIN]


@dataclass
class ReplayBuffer:
    """Stored pseudo-queries from past corpora (never test queries)."""

    queries: list[dt.QueryRecord] = field(default_factory=list)

    def add_corpus(self, queries: list[dt.QueryRecord]) -> None:
        for q in queries:
            if q.split != dt.TRAIN or q.kind != dt.PSEUDO:
                continue
            self.queries.append(q)

    def sample(self, rng: np.random.Generator, n: int) -> list[dt.QueryRecord]:
        if not self.queries:
            return []
        idx = rng.choice(len(self.queries), size=min(n, len(self.queries)), replace=False)
        return [self.queries[i] for i in idx]


@dataclass
class CentroidCache:
    """Grow-only matrix of average train-query embeddings, one column per doc."""

    z: np.ndarray  # (dim, total_docs)
    reads: int = 0

    def append(self, cols: np.ndarray) -> None:
        self.z = np.concatenate([self.z, cols], axis=1)

    def columns(self, start: int, end: int) -> np.ndarray:
        self.reads += 1
        return self.z[:, start:end]


@dataclass
class FreezeAudit:
    """Digest snapshot of everything currently frozen."""

    encoder: str | None = None
    classifier_segments: dict[int, str] = field(default_factory=dict)
    pool_entries: dict[int, str] = field(default_factory=dict)

    @classmethod
    def collect(cls, model: rt.DsiModel) -> "FreezeAudit":
        audit = cls()
        if model.encoder.frozen:
            audit.encoder = model.encoder.digest()
        for s, frozen in enumerate(model.classifier.frozen):
            if frozen:
                audit.classifier_segments[s] = model.classifier.segment_digest(s)
        if model.pool is not None:
            audit.pool_entries = model.pool.frozen_digests()
        return audit

    def verify(self, model: rt.DsiModel) -> list[str]:
        bad = []
        if self.encoder is not None and model.encoder.digest() != self.encoder:
            bad.append("encoder")
        for s, dig in self.classifier_segments.items():
            if model.classifier.segment_digest(s) != dig:
                bad.append(f"classifier.segment{s}")
        if self.pool_entries:
            current = model.pool.entry_digests()
            for i, dig in self.pool_entries.items():
                if current[i] != dig:
                    bad.append(f"pool.entry{i}")
        return bad

    def check(self, model: rt.DsiModel) -> None:
        bad = self.verify(model)
        if bad:
            raise ContractError(f"frozen tensors changed during training: {bad}")


# ---------------------------------------------------------------------------
# shared training machinery
# ---------------------------------------------------------------------------


def _examples(model: rt.DsiModel, queries: list[dt.QueryRecord]):
    reg = model.registry
    return [(enc.prepend_cls(q.tokens), reg.docid(q.doc_id)) for q in queries]


def _epoch_batches(examples, batch_size: int, rng: np.random.Generator):
    """Same-length batches, shuffled within each length group."""
    by_len: dict[int, list[int]] = {}
    for i, (toks, _) in enumerate(examples):
        by_len.setdefault(len(toks), []).append(i)
    batches = []
    for length in sorted(by_len):
        idxs = np.asarray(by_len[length])
        idxs = idxs[rng.permutation(len(idxs))]
        for lo in range(0, len(idxs), batch_size):
            batches.append([examples[i] for i in idxs[lo : lo + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _train_phase(
    model: rt.DsiModel,
    examples,
    settings: PhaseSettings,
    *,
    epochs: int | None = None,
    plan: rt.FreezePlan,
    pool_strategy: str | None,
    t: int,
    match_coeff: float = 1.0,
    forced_ids=None,
    rng: np.random.Generator,
    replay: ReplayBuffer | None = None,
    replay_every: int = 0,
    replay_examples_fn=None,
    audit: FreezeAudit | None = None,
    audit_each_step: bool = False,
) -> dict:
    epochs = settings.epochs if epochs is None else epochs
    params = model.trainable_params(plan)
    masks = plan.masks(model)
    opt = AdamW(lr=settings.lr, weight_decay=settings.weight_decay)
    epoch_losses = []
    n_steps = 0
    t_start = time.perf_counter()
    for _ in range(epochs):
        losses = []
        for bi, batch in enumerate(_epoch_batches(examples, settings.batch_size, rng)):
            loss, grads = rt.dsi_loss(batch, model, pool_strategy, t, plan=plan,
                                      match_coeff=match_coeff, forced_ids=forced_ids)
            opt.step(params, grads, masks)
            losses.append(loss)
            n_steps += 1
            if audit is not None and audit_each_step:
                audit.check(model)
            if replay is not None and replay_every and (bi + 1) % replay_every == 0:
                sampled = replay.sample(rng, settings.batch_size)
                if sampled:
                    rbatch = replay_examples_fn(sampled)
                    _, rgrads = rt.dsi_loss(rbatch, model, pool_strategy, t, plan=plan,
                                            match_coeff=match_coeff, forced_ids=forced_ids)
                    opt.step(params, rgrads, masks)
                    n_steps += 1
                    if audit is not None and audit_each_step:
                        audit.check(model)
        epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
    if audit is not None:
        audit.check(model)
    return {
        "epochs": epochs,
        "lr": settings.lr,
        "batch_size": settings.batch_size,
        "epoch_losses": epoch_losses,
        "wall_time_s": time.perf_counter() - t_start,
        "steps": n_steps,
    }


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_corpus(model: rt.DsiModel, queries, k: int = 10,
                    selection_log=None, corpus_id: int = -1) -> dict[str, float]:
    """hits@1, hits@10, mrr@10 over one test-query set."""
    if not queries:
        return {m: 0.0 for m in METRICS}
    tokens = [enc.prepend_cls(q.tokens) for q in queries]
    gold = np.asarray([model.registry.docid(q.doc_id) for q in queries])
    hs = rt.encode_queries(model, tokens, use_prompts=True,
                           selection_log=selection_log, corpus_id=corpus_id,
                           query_ids=[q.query_id for q in queries])
    ranks = rt.gold_ranks(hs, model.classifier, gold)
    rr = np.where(ranks <= k, 1.0 / ranks, 0.0)
    return {
        "hits@1": float((ranks <= 1).mean()),
        "hits@10": float((ranks <= k).mean()),
        "mrr@10": float(rr.mean()),
    }


def _eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("PROMPTDSI_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_row(model: rt.DsiModel, access: DataAccess, t: int,
                 perf: dict[str, PerfMatrix], selection_log=None) -> None:
    """Fill P[t][i] for every i <= t on the test splits."""
    access.phase = f"eval:t{t}"
    query_sets = [(i, access.queries(i, dt.TEST)) for i in range(t + 1)]
    threads = _eval_threads()
    if threads > 1 and len(query_sets) > 1:
        # read-only fan-out; each worker gets its own pass counter, merged after
        def work(item):
            i, queries = item
            local = replace(model, counter=enc.PassCounter())
            log = [] if selection_log is not None else None
            vals = evaluate_corpus(local, queries, selection_log=log, corpus_id=i)
            return i, vals, log, local.counter
        with ThreadPoolExecutor(max_workers=threads) as ex:
            for i, vals, log, counter in ex.map(work, query_sets):
                for m in METRICS:
                    perf[m].set(t, i, vals[m])
                if log is not None:
                    selection_log.extend(log)
                model.counter.layer_invocations += counter.layer_invocations
                model.counter.forward_passes += counter.forward_passes
    else:
        for i, queries in query_sets:
            vals = evaluate_corpus(model, queries, selection_log=selection_log, corpus_id=i)
            for m in METRICS:
                perf[m].set(t, i, vals[m])


# ---------------------------------------------------------------------------
# timestep 0
# ---------------------------------------------------------------------------


def build_model(encoder_config: enc.EncoderConfig, seed: int, dtype="float32") -> rt.DsiModel:
    dtype = resolve_dtype(dtype)
    state = enc.EncoderState.init(encoder_config, named_rng(seed, "init:encoder"), dtype)
    return rt.DsiModel(
        encoder=state,
        classifier=rt.Classifier.empty(encoder_config.dim, dtype),
        registry=rt.DocidRegistry(),
    )


def train_initial(model: rt.DsiModel, access: DataAccess, plan: TimestepPlan) -> dict:
    """Full-model cross-entropy training on the initial corpus."""
    access.phase = "train:t0"
    docs = access.docs(0)
    model.registry.add_corpus([d.doc_id for d in docs])
    rt.expand_classifier(model.classifier, len(docs), named_rng(plan.seed, "init:classifier"))
    examples = _examples(model, access.queries(0, dt.TRAIN))
    fplan = rt.default_plan(model, 0)
    report = _train_phase(
        model, examples, plan.d0, plan=fplan, pool_strategy=None, t=0,
        rng=named_rng(plan.seed, "shuffle:t0"),
    )
    report["t"] = 0
    report["trainable_params"] = sum(p.size for p in model.trainable_params(fplan).values())
    return report


def doc_query_mean_embeddings(model: rt.DsiModel, docs, queries) -> np.ndarray:
    """Per-document mean of its train-query CLS embeddings (prompt-free).

    Returns (dim, n_docs) with columns in ``docs`` order."""
    by_doc: dict[str, list] = {d.doc_id: [] for d in docs}
    for q in queries:
        if q.split == dt.TRAIN and q.doc_id in by_doc:
            by_doc[q.doc_id].append(q)
    cols = np.zeros((model.encoder.config.dim, len(docs)), dtype=model.dtype)
    for j, d in enumerate(docs):
        qs = by_doc[d.doc_id]
        if not qs:
            raise ContractError(f"document {d.doc_id!r} has no train queries to embed")
        hs = rt.encode_queries(model, [enc.prepend_cls(q.tokens) for q in qs], use_prompts=False)
        cols[:, j] = hs.mean(axis=0)
    return cols


def mine_topic_model(model: rt.DsiModel, access: DataAccess, plan: TimestepPlan) -> tp.TopicModel:
    access.phase = "topic-mining"
    docs = access.docs(0)
    queries = access.queries(0, dt.TRAIN)
    cols = doc_query_mean_embeddings(model, docs, queries)
    return tp.mine_topics(
        cols.T.astype(np.float64),
        [d.doc_id for d in docs],
        plan.num_topics,
        named_rng(plan.seed, "kmeans"),
        doc_tokens=[d.tokens for d in docs],
    )


# ---------------------------------------------------------------------------
# continual steps
# ---------------------------------------------------------------------------


@dataclass
class StrategyAux:
    replay: ReplayBuffer | None = None
    cache: CentroidCache | None = None
    topic_keys: np.ndarray | None = None


def continual_index_step(
    model: rt.DsiModel,
    access: DataAccess,
    t: int,
    plan: TimestepPlan,
    aux: StrategyAux,
    perf_for_pre: PerfMatrix | None = None,
) -> dict:
    """Register corpus t, apply the strategy's freeze plan, train, report."""
    tag = plan.strategy
    access.phase = f"expand:t{t}"
    docs = access.docs(t)
    model.registry.add_corpus([d.doc_id for d in docs])
    seg = rt.expand_classifier(model.classifier, len(docs),
                               named_rng(plan.seed, f"expand:t{t}"))
    full_ft = tag in (SEQ_FT, REPLAY_FT, MULTI, JOINT)
    if not full_ft:
        for s in range(seg):
            model.classifier.frozen[s] = True

    pool_strategy = pool_strategy_of(tag)
    forced_ids = None
    if pool_strategy is not None:
        model.pool = pr.allocate_for_timestep(
            model.pool, pool_strategy, t, plan.pool_cfg,
            model.encoder.config.dim, len(model.encoder.config.prompt_layers),
            named_rng(plan.seed, f"pool:t{t}"), model.dtype,
            topic_keys=aux.topic_keys,
        )
        if pool_strategy == pr.SPP:
            forced_ids = [model.pool.provenance.index(t)]

    # plasticity reference: the new corpus before this step's training
    pre_vals = None
    if perf_for_pre is not None:
        access.phase = f"pre-eval:t{t}"
        pre_vals = evaluate_corpus(model, access.queries(t, dt.TEST))

    audit = FreezeAudit.collect(model)
    fplan = rt.default_plan(model, t, full_finetune=full_ft)
    access.phase = f"train:t{t}"
    examples = _examples(model, access.queries(t, dt.TRAIN))
    rng = named_rng(plan.seed, f"shuffle:t{t}")
    audit_each_step = model.dtype == np.float64

    if tag == CACHED_CENTROID:
        report = _centroid_step(model, access, t, plan, aux, examples, fplan, rng, audit)
    else:
        epochs = plan.cl.epochs
        if is_promptdsi(tag):
            epochs = plan.cl.epochs * plan.promptdsi_epoch_mult
        report = _train_phase(
            model, examples, plan.cl, epochs=epochs, plan=fplan,
            pool_strategy=pool_strategy, t=t,
            match_coeff=plan.pool_cfg.match_coeff, forced_ids=forced_ids,
            rng=rng,
            replay=aux.replay if tag == REPLAY_FT else None,
            replay_every=plan.replay_every,
            replay_examples_fn=(lambda qs: _examples(model, qs)) if tag == REPLAY_FT else None,
            audit=audit, audit_each_step=audit_each_step,
        )
    if tag == REPLAY_FT and aux.replay is not None:
        access.phase = f"buffer:t{t}"
        aux.replay.add_corpus(access.queries(t, dt.TRAIN))

    report["t"] = t
    report["strategy"] = tag
    report["pre_hits@10_new"] = None if pre_vals is None else pre_vals["hits@10"]
    report["trainable_params"] = params_accounting(
        model.registry, model.encoder.config.dim,
        model.pool if pool_strategy else None, t_start=t, t_end=t)
    report["audit_ok"] = not audit.verify(model)
    return report


def _centroid_step(model, access, t, plan, aux, examples, fplan, rng, audit) -> dict:
    """New columns become normalized cached query-embedding means, then are
    optionally refined by a few epochs of gradient on those columns only."""
    access.phase = f"cache:t{t}"
    docs = access.timeline.corpus(t).docs
    queries = access.queries(t, dt.TRAIN)
    cols = doc_query_mean_embeddings(model, docs, queries)
    if aux.cache is None:
        raise ContractError("centroid strategy requires an initialized cache")
    aux.cache.append(cols)
    start, end = model.classifier.segments[-1]
    cached = aux.cache.columns(start, end)
    norms = np.linalg.norm(cached, axis=0, keepdims=True)
    norms[norms == 0.0] = 1.0
    model.classifier.weights[:, start:end] = cached / norms
    report = {"epochs": 0, "lr": plan.cl.lr, "batch_size": plan.cl.batch_size,
              "epoch_losses": [], "wall_time_s": 0.0, "steps": None}
    if plan.centroid_refine_epochs > 0:
        access.phase = f"train:t{t}"
        report = _train_phase(
            model, examples, plan.cl, epochs=plan.centroid_refine_epochs,
            plan=fplan, pool_strategy=None, t=t, rng=rng,
            audit=audit, audit_each_step=model.dtype == np.float64,
        )
    return report


# ---------------------------------------------------------------------------
# whole schedules
# ---------------------------------------------------------------------------


@dataclass
class ScheduleResult:
    perf: dict[str, PerfMatrix]
    reports: list[dict]
    model: rt.DsiModel
    selection_log: list[pr.SelectionRecord]
    topic_model: tp.TopicModel | None
    access: DataAccess
    continual_invocations: int = 0
    continual_wall_s: float = 0.0
    audit_ok: bool = True

    def trace(self) -> list[dict]:
        """Per-timestep A/LA/F (where the lower triangle is populated)."""
        out = []
        for t in range(self.perf["hits@10"].max_t + 1):
            row: dict = {"t": t}
            for m in METRICS:
                if _triangle_complete(self.perf[m], t):
                    for k, v in cl_metrics(self.perf[m], t).items():
                        row[f"{m}:{k}"] = v
            out.append(row)
        return out


def _triangle_complete(perf: PerfMatrix, t: int) -> bool:
    return all(perf.has(tt, i) for tt in range(t + 1) for i in range(tt + 1))


def run_schedule(
    plan: TimestepPlan,
    timeline: dt.CorpusTimeline,
    encoder_config: enc.EncoderConfig | None = None,
    dtype="float32",
    base_model: rt.DsiModel | None = None,
    checkpoint_dir=None,
) -> ScheduleResult:
    """Execute t = 0..T and fill one PerfMatrix row per timestep.

    ``base_model`` skips initial training (continue-from-checkpoint); the
    encoder's selection mode is forced to match the strategy (two-pass for
    NAIVE_*)."""
    access = DataAccess(timeline)
    perf = {m: PerfMatrix(m) for m in METRICS}
    reports: list[dict] = []
    selection_log: list[pr.SelectionRecord] = []

    if base_model is not None:
        model = base_model
    else:
        if encoder_config is None:
            raise ConfigError("need an encoder config (or a base model)")
        model = build_model(encoder_config, plan.seed, dtype)
        reports.append(train_initial(model, access, plan))

    desired_mode = enc.TWO_PASS if is_naive(plan.strategy) else enc.SINGLE_PASS
    if model.encoder.config.selection_mode != desired_mode:
        model.encoder.config = replace(model.encoder.config, selection_mode=desired_mode)
    if freezes_encoder(plan.strategy):
        model.encoder.frozen = True

    aux = StrategyAux()
    topic_model = None
    if pool_strategy_of(plan.strategy) == pr.TOPIC:
        topic_model = mine_topic_model(model, access, plan)
        aux.topic_keys = tp.topic_keys(topic_model)
    if plan.strategy == CACHED_CENTROID:
        access.phase = "cache:t0"
        docs0 = access.timeline.corpus(0).docs
        aux.cache = CentroidCache(
            z=doc_query_mean_embeddings(model, docs0, access.queries(0, dt.TRAIN)))
    if plan.strategy == REPLAY_FT:
        access.phase = "buffer:t0"
        aux.replay = ReplayBuffer()
        aux.replay.add_corpus(access.queries(0, dt.TRAIN))

    evaluate_row(model, access, 0, perf)
    run_audit = FreezeAudit.collect(model)
    if checkpoint_dir is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(checkpoint_dir / "ckpt_t0", model, timestep=0)

    # everything counted below involves the pool once it exists
    inv_start = model.counter.layer_invocations
    wall_start = time.perf_counter()
    t_max = timeline.num_timesteps - 1

    if plan.strategy in (MULTI, JOINT):
        _merged_phase(model, access, plan, t_max)
        evaluate_row(model, access, t_max, perf, selection_log=selection_log)
        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            save_checkpoint(checkpoint_dir / f"ckpt_t{t_max}", model, timestep=t_max)
    else:
        for t in range(1, t_max + 1):
            report = continual_index_step(model, access, t, plan, aux,
                                          perf_for_pre=perf["hits@10"])
            evaluate_row(model, access, t, perf,
                         selection_log=selection_log if t == t_max else None)
            report["post_hits@10_new"] = perf["hits@10"].get(t, t)
            reports.append(report)
            if checkpoint_dir is not None:
                from .checkpoint import save_checkpoint

                save_checkpoint(checkpoint_dir / f"ckpt_t{t}", model, timestep=t)

    return ScheduleResult(
        perf=perf,
        reports=reports,
        model=model,
        selection_log=selection_log,
        topic_model=topic_model,
        access=access,
        continual_invocations=model.counter.layer_invocations - inv_start,
        continual_wall_s=time.perf_counter() - wall_start,
        audit_ok=not run_audit.verify(model),
    )


def _merged_phase(model: rt.DsiModel, access: DataAccess, plan: TimestepPlan, t_max: int) -> None:
    """MULTI trains once on the merged increments; JOINT also includes the
    initial corpus. Full-model fine-tuning either way."""
    all_examples = []
    for t in range(1, t_max + 1):
        access.phase = f"expand:t{t}"
        docs = access.docs(t)
        model.registry.add_corpus([d.doc_id for d in docs])
        rt.expand_classifier(model.classifier, len(docs), named_rng(plan.seed, f"expand:t{t}"))
    access.phase = "train:merged"
    for t in range(0 if plan.strategy == JOINT else 1, t_max + 1):
        all_examples.extend(_examples(model, access.queries(t, dt.TRAIN)))
    fplan = rt.default_plan(model, t_max, full_finetune=True)
    model.encoder.frozen = False
    _train_phase(model, all_examples, plan.cl, plan=fplan, pool_strategy=None,
                 t=t_max, rng=named_rng(plan.seed, "shuffle:merged"))
