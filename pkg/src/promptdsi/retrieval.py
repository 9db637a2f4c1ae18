"""Classification-based retrieval head and the assembled model.

Every document owns one column of a linear classifier over the encoder's CLS
embedding; retrieval sorts the inner products. Continual indexing appends
column segments per timestep and freezes earlier ones. The training
objectives combine cross entropy over all columns with the strategy-specific
prompt terms; all gradients are computed analytically.
"""

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import prompts as pr
from .errors import ContractError, DataError
from .numerics import array_digest, cross_entropy_logits

RankedList = list[tuple[int, float]]  # (docid, score), scores non-increasing


@dataclass
class DocidRegistry:
    """External document id -> dense integer docid, in arrival order."""

    ids: dict[str, int] = field(default_factory=dict)
    segments: list[tuple[int, int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.ids)

    def add_corpus(self, external_ids) -> int:
        start = self.size
        for ext in external_ids:
            if ext in self.ids:
                raise DataError(f"duplicate document id {ext!r}")
            self.ids[ext] = len(self.ids)
        self.segments.append((start, self.size))
        return len(self.segments) - 1

    def docid(self, external_id: str) -> int:
        try:
            return self.ids[external_id]
        except KeyError:
            raise DataError(f"unregistered document id {external_id!r}") from None

    def segment_of(self, docid: int) -> int:
        for s, (start, end) in enumerate(self.segments):
            if start <= docid < end:
                return s
        raise DataError(f"docid {docid} outside all segments")

    def to_json(self) -> dict:
        return {"ids": self.ids, "segments": [list(s) for s in self.segments]}

    @classmethod
    def from_json(cls, obj: dict) -> "DocidRegistry":
        return cls(ids=dict(obj["ids"]), segments=[tuple(s) for s in obj["segments"]])


@dataclass
class Classifier:
    """Weight matrix (dim, total_docs) with per-segment freeze flags."""

    weights: np.ndarray
    segments: list[tuple[int, int]] = field(default_factory=list)
    frozen: list[bool] = field(default_factory=list)

    @classmethod
    def empty(cls, dim: int, dtype=np.float64) -> "Classifier":
        return cls(weights=np.zeros((dim, 0), dtype=dtype))

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def total(self) -> int:
        return self.weights.shape[1]

    def column_mask(self) -> np.ndarray:
        """1.0 for trainable columns, 0.0 for frozen segments."""
        mask = np.zeros(self.total, dtype=self.weights.dtype)
        for (start, end), is_frozen in zip(self.segments, self.frozen):
            if not is_frozen:
                mask[start:end] = 1.0
        return mask

    def freeze_through(self, segment: int) -> None:
        for s in range(min(segment + 1, len(self.frozen))):
            self.frozen[s] = True

    def segment_digest(self, segment: int) -> str:
        start, end = self.segments[segment]
        return array_digest(self.weights[:, start:end])


def expand_classifier(cls: Classifier, n_new: int, rng: np.random.Generator) -> int:
    """Append n_new trainable columns drawn from N(0, 0.02); returns the new
    segment index. Existing columns are untouched."""
    if n_new < 1:
        raise ContractError("classifier expansion requires at least one new column")
    new = rng.normal(0.0, 0.02, size=(cls.dim, n_new)).astype(cls.weights.dtype)
    start = cls.total
    cls.weights = np.concatenate([cls.weights, new], axis=1)
    cls.segments.append((start, start + n_new))
    cls.frozen.append(False)
    return len(cls.segments) - 1


def score_and_rank(h: np.ndarray, cls: Classifier, k: int) -> RankedList:
    """Exact top-k docids by inner product, ties broken toward lower docid."""
    if k <= 0:
        raise ContractError("k must be positive")
    if k > cls.total:
        raise ContractError(f"k={k} exceeds {cls.total} registered docids")
    scores = h @ cls.weights
    order = np.lexsort((np.arange(cls.total), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def gold_ranks(hs: np.ndarray, cls: Classifier, gold: np.ndarray) -> np.ndarray:
    """1-based rank of each gold docid under the same ordering as
    score_and_rank, vectorized over a query batch."""
    scores = hs @ cls.weights  # (B, C)
    g = scores[np.arange(len(gold)), gold]
    higher = (scores > g[:, None]).sum(axis=1)
    tied_before = ((scores == g[:, None]) & (np.arange(cls.total)[None] < gold[:, None])).sum(axis=1)
    return higher + tied_before + 1


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


@dataclass
class DsiModel:
    encoder: enc.EncoderState
    classifier: Classifier
    registry: DocidRegistry
    pool: pr.PromptPool | None = None
    counter: enc.PassCounter = field(default_factory=enc.PassCounter)

    @property
    def dtype(self):
        return self.encoder.dtype

    @property
    def selection_mode(self) -> str:
        return self.encoder.config.selection_mode

    def trainable_params(self, plan: "FreezePlan") -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        if plan.encoder_trainable:
            for name, p in self.encoder.params.items():
                params["encoder." + name] = p
        params["classifier.weights"] = self.classifier.weights
        if self.pool is not None and plan.pool_trainable:
            params.update(self.pool.params())
        return params


@dataclass
class FreezePlan:
    """Which tensors the current phase may update, with per-entry masks."""

    encoder_trainable: bool
    classifier_mask: np.ndarray | None  # None = all columns trainable
    pool_trainable: bool = False

    def masks(self, model: DsiModel) -> dict[str, np.ndarray | None]:
        masks: dict[str, np.ndarray | None] = {}
        if self.encoder_trainable:
            for name in model.encoder.params:
                masks["encoder." + name] = None
        masks["classifier.weights"] = self.classifier_mask
        if model.pool is not None and self.pool_trainable:
            masks.update(model.pool.trainable_masks())
        return masks


def default_plan(model: DsiModel, t: int, full_finetune: bool = False) -> FreezePlan:
    """t = 0 or full fine-tuning: everything trains. Otherwise the backbone is
    frozen and only the newest column segment (plus the pool) trains."""
    if t == 0 or full_finetune:
        return FreezePlan(encoder_trainable=True, classifier_mask=None,
                          pool_trainable=model.pool is not None)
    return FreezePlan(
        encoder_trainable=False,
        classifier_mask=model.classifier.column_mask(),
        pool_trainable=model.pool is not None,
    )


# ---------------------------------------------------------------------------
# forward / backward through the assembly
# ---------------------------------------------------------------------------


def _forward_group(
    model: DsiModel,
    ids: np.ndarray,
    use_prompts: bool,
    forced_ids=None,
    fixed_selection: np.ndarray | None = None,
):
    """Run one same-length query batch through the encoder, selecting and
    injecting prompts according to the configured pass mode.

    Returns (h_q (B, dim), ctx) where ctx carries everything backward needs.
    """
    state = model.encoder
    cfg = state.config
    pool = model.pool if use_prompts else None
    prompt_layers = cfg.prompt_layers if pool is not None else ()
    first_prompt_layer = min(prompt_layers) if prompt_layers else None

    ctx: dict = {"ids": ids, "pool_used": pool is not None, "sel_ids": None,
                 "alpha": None, "h_sel": None, "sel_dists": None}

    x, emb_cache = enc.embed_batch(ids, state)
    ctx["emb_cache"] = emb_cache
    caches = []
    prefixes: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    if pool is not None and cfg.selection_mode == enc.TWO_PASS:
        # first pass: prompt-free CLS embedding for selection
        x0 = x
        for layer in range(1, cfg.num_layers + 1):
            x0, _ = enc.block_forward(x0, state, layer, None, model.counter)
        h_sel, _ = enc.final_cls_forward(x0, state)
        ctx["h_sel"] = h_sel
        prefixes = _select_and_gather(model, pool, h_sel, forced_ids, fixed_selection, ctx)

    for layer in range(1, cfg.num_layers + 1):
        if pool is not None and cfg.selection_mode == enc.SINGLE_PASS and layer == first_prompt_layer:
            h_sel = x.mean(axis=1)  # layer (l-1) activations, reused in-pass
            ctx["h_sel"] = h_sel
            prefixes = _select_and_gather(model, pool, h_sel, forced_ids, fixed_selection, ctx)
        x, cache = enc.block_forward(x, state, layer, prefixes.get(layer), model.counter)
        caches.append(cache)

    h_q, fin_cache = enc.final_cls_forward(x, state)
    model.counter.forward_passes += ids.shape[0]
    ctx["caches"] = caches
    ctx["fin_cache"] = fin_cache
    ctx["x_shape"] = x.shape
    ctx["prompt_layers"] = prompt_layers
    return h_q, ctx


def _select_and_gather(model, pool, h_sel, forced_ids, fixed_selection, ctx):
    cfg = model.encoder.config
    m2 = pool.prompt_len // 2
    if pool.strategy == pr.CODA:
        composed, alpha = pr.coda_compose_batch(h_sel, pool)
        ctx["alpha"] = alpha
        ctx["composed_shape"] = composed.shape
        return {
            layer: (composed[:, j, :m2, :], composed[:, j, m2:, :])
            for j, layer in enumerate(cfg.prompt_layers)
        }
    if fixed_selection is not None:
        sel_ids = fixed_selection
        all_d = pr.key_distance_matrix(h_sel, pool)
        sel_d = np.take_along_axis(all_d, sel_ids, axis=1)
    else:
        sel_ids, sel_d = pr.select_topn_batch(h_sel, pool, forced_ids=forced_ids)
    ctx["sel_ids"] = sel_ids
    ctx["sel_dists"] = sel_d
    return pr.gather_prefixes(pool, sel_ids, cfg.prompt_layers)


def _backward_group(model: DsiModel, ctx, d_hq: np.ndarray, need_encoder_grads: bool):
    """Backpropagate d_hq through the captured forward; returns
    (encoder_grads or None, pool_prompt_grads or None, coda_grads or None)."""
    state = model.encoder
    grads = state.zero_grads() if need_encoder_grads else None
    dx = enc.final_cls_backward(d_hq, ctx["fin_cache"], ctx["x_shape"], state, grads)
    prefix_grads: dict[int, tuple] = {}
    lowest_needed = min(ctx["prompt_layers"]) if ctx["prompt_layers"] else None
    for cache in reversed(ctx["caches"]):
        if not need_encoder_grads and lowest_needed is not None and cache["layer"] < lowest_needed:
            break  # nothing trainable below the first prompting layer
        if not need_encoder_grads and lowest_needed is None:
            break
        dx, dpf = enc.block_backward(dx, cache, state, grads)
        if cache["layer"] in ctx["prompt_layers"]:
            prefix_grads[cache["layer"]] = dpf
    if need_encoder_grads:
        enc.embed_backward(dx, ctx["emb_cache"], state, grads)

    if not ctx["pool_used"] or not prefix_grads:
        return grads, None, None

    pool = model.pool
    if pool.strategy == pr.CODA:
        m2 = pool.prompt_len // 2
        d_comp = np.zeros(ctx["composed_shape"], dtype=model.dtype)
        for j, layer in enumerate(ctx["prompt_layers"]):
            dpk, dpv = prefix_grads.get(layer, (None, None))
            if dpk is not None:
                d_comp[:, j, :m2, :] = dpk
                d_comp[:, j, m2:, :] = dpv
        coda_grads = pr.coda_compose_backward(d_comp, ctx["h_sel"], pool, ctx["alpha"])
        return (grads if need_encoder_grads else None), None, coda_grads
    d_prompts = pr.scatter_prefix_grads(pool, ctx["sel_ids"], ctx["prompt_layers"], prefix_grads)
    return (grads if need_encoder_grads else None), d_prompts, None


def group_by_length(token_lists) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, toks in enumerate(token_lists):
        groups.setdefault(len(toks), []).append(i)
    return groups


def encode_queries(
    model: DsiModel,
    token_lists,
    use_prompts: bool = True,
    selection_log: list | None = None,
    corpus_id: int = -1,
    query_ids=None,
    max_group: int = 256,
) -> np.ndarray:
    """CLS embeddings for already-CLS-prefixed token sequences, any lengths.

    Optionally appends one SelectionRecord per query to ``selection_log``.
    """
    out = np.zeros((len(token_lists), model.encoder.config.dim), dtype=model.dtype)
    for _, idxs in sorted(group_by_length(token_lists).items()):
        for lo in range(0, len(idxs), max_group):
            chunk = idxs[lo : lo + max_group]
            ids = np.asarray([token_lists[i] for i in chunk], dtype=np.intp)
            h_q, ctx = _forward_group(model, ids, use_prompts)
            out[chunk] = h_q
            if selection_log is not None and ctx["sel_ids"] is not None:
                for row, i in enumerate(chunk):
                    selection_log.append(pr.SelectionRecord(
                        corpus_id=corpus_id,
                        query_id=(query_ids[i] if query_ids is not None else str(i)),
                        prompt_ids=tuple(int(p) for p in ctx["sel_ids"][row]),
                        distances=tuple(float(d) for d in ctx["sel_dists"][row]),
                    ))
    return out


# ---------------------------------------------------------------------------
# training objectives
# ---------------------------------------------------------------------------


def dsi_loss(
    batch,
    model: DsiModel,
    strategy: str | None,
    t: int,
    plan: FreezePlan | None = None,
    match_coeff: float = 1.0,
    forced_ids=None,
    fixed_selections=None,
):
    """Loss and analytic gradients for one batch of (token_ids, gold_docid).

    * t = 0 (or no pool): cross entropy over all columns.
    * L2P / SPP: cross entropy plus the key-matching loss.
    * CODA: cross entropy; gradients reach prompts, keys and attention
      vectors through the composition weights.
    * TOPIC: cross entropy only; keys receive no gradient.

    The cross-entropy denominator always spans every registered docid. The
    returned gradient dict contains only tensors the plan marks trainable,
    already masked (frozen entries zeroed). ``fixed_selections`` pins the
    selected prompt ids (for finite-difference checks where re-selection
    would make the loss discontinuous).
    """
    if plan is None:
        plan = default_plan(model, t)
    cls = model.classifier
    token_lists = [list(q) for q, _ in batch]
    gold = np.asarray([g for _, g in batch], dtype=np.intp)
    if np.any(gold < 0) or np.any(gold >= cls.total):
        raise DataError("gold docid outside the registry")
    b_total = len(batch)
    use_prompts = model.pool is not None and strategy is not None

    grads: dict[str, np.ndarray] = {"classifier.weights": np.zeros_like(cls.weights)}
    if plan.encoder_trainable:
        for name in model.encoder.params:
            grads["encoder." + name] = np.zeros_like(model.encoder.params[name])
    if use_prompts and plan.pool_trainable:
        for name, p in model.pool.params().items():
            grads[name] = np.zeros_like(p)

    total_ce = 0.0
    total_match = 0.0
    groups = group_by_length(token_lists)
    for _, idxs in sorted(groups.items()):
        ids = np.asarray([token_lists[i] for i in idxs], dtype=np.intp)
        fixed = fixed_selections[idxs] if fixed_selections is not None else None
        h_q, ctx = _forward_group(model, ids, use_prompts, forced_ids=forced_ids,
                                  fixed_selection=fixed)
        logits = h_q @ cls.weights
        ce, d_logits = cross_entropy_logits(logits, gold[idxs])
        b_g = len(idxs)
        total_ce += ce * b_g
        d_logits *= b_g / b_total  # group mean -> whole-batch mean
        grads["classifier.weights"] += h_q.T @ d_logits
        d_hq = d_logits @ cls.weights.T

        enc_grads, d_prompts, coda_grads = _backward_group(
            model, ctx, d_hq, need_encoder_grads=plan.encoder_trainable
        )
        if enc_grads is not None:
            for name, g in enc_grads.items():
                grads["encoder." + name] += g
        if use_prompts and plan.pool_trainable:
            if d_prompts is not None:
                grads["pool.prompts"] += d_prompts
            if coda_grads is not None:
                for name, g in coda_grads.items():
                    grads[name] += g
            if strategy in (pr.L2P, pr.SPP) and ctx["sel_ids"] is not None:
                for row, i in enumerate(idxs):
                    sel = pr.SelectionResult(
                        ids=ctx["sel_ids"][row], distances=ctx["sel_dists"][row],
                        match_loss=float(ctx["sel_dists"][row].sum()),
                        embedding=ctx["h_sel"][row], pool_version=model.pool.version,
                    )
                    total_match += sel.match_loss
                    kg = pr.match_loss_grad(ctx["h_sel"][row], model.pool, sel)["keys"]
                    grads["pool.keys"] += (match_coeff / b_total) * kg

    loss = total_ce / b_total
    if strategy in (pr.L2P, pr.SPP) and use_prompts:
        loss += match_coeff * total_match / b_total

    # apply freeze masks so callers can hand grads straight to the optimizer
    if plan.classifier_mask is not None:
        grads["classifier.weights"] *= plan.classifier_mask
    if use_prompts and plan.pool_trainable:
        for name, mask in model.pool.trainable_masks().items():
            if name in grads:
                grads[name] *= mask
    if not np.isfinite(loss):
        from .errors import NumericError

        raise NumericError(f"non-finite training loss {loss}")
    return loss, grads


def loss_only(batch, model, strategy, t, plan=None, match_coeff=1.0,
              forced_ids=None, fixed_selections=None) -> float:
    loss, _ = dsi_loss(batch, model, strategy, t, plan=plan, match_coeff=match_coeff,
                       forced_ids=forced_ids, fixed_selections=fixed_selections)
    return loss
