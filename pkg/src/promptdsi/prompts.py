"""Prompt pool: key-value matching, weighted composition, allocation policies.

A pool holds M entries. Entry i is a prompt tensor (one (m, dim) prefix per
prompting layer), a key k_i in R^dim, and, for the weighted-composition
strategy, an attention vector A_i in R^dim. Queries pick prompts by cosine
distance between a selection embedding h and the keys; the composition
strategy instead mixes all prompts with weights alpha_i = cos(h * A_i, k_i).

Four allocation strategies:

* L2P    -- one shared pool, created once, fully trainable at every timestep.
* SPP    -- one key-prompt pair appended per timestep, previous pairs frozen.
* CODA   -- a fixed number of prompts appended per timestep with keys and
            attention vectors, previous entries frozen; composition replaces
            selection.
* TOPIC  -- one prompt per mined topic, keys are fixed unit-norm topic
            embeddings, prompts shared and trainable at every timestep.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DomainError
from .numerics import array_digest

L2P = "L2P"
SPP = "SPP"
CODA = "CODA"
TOPIC = "TOPIC"
STRATEGIES = (L2P, SPP, CODA, TOPIC)

SHARED = -1  # provenance marker for entries not tied to one timestep


@dataclass
class PoolConfig:
    size: int = 5                 # L2P pool size
    prompt_len: int = 20          # m, split half keys / half values
    top_n: int = 1
    coda_prompts_per_task: int = 2
    coda_prompt_len: int = 10
    match_coeff: float = 1.0      # weight on the key-matching loss term
    topic_freeze_after_first: bool = False  # ablation switch

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "PoolConfig":
        return cls(**obj)


@dataclass
class PromptPool:
    strategy: str
    prompts: np.ndarray            # (M, n_prompt_layers, m, dim), m even
    keys: np.ndarray               # (M, dim)
    attn: np.ndarray | None        # (M, dim), CODA only
    frozen: np.ndarray             # (M,) bool, per-entry freeze
    top_n: int
    provenance: list[int]          # timestep or topic id per entry
    version: int = 0               # bumped on structural change

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown pool strategy {self.strategy!r}")
        if self.prompts.shape[0] != self.keys.shape[0]:
            raise ConfigError("prompts and keys must have matching entry counts")
        if self.prompts.shape[2] % 2 != 0:
            raise ConfigError("prompt length m must be even")
        if self.attn is not None and self.attn.shape != self.keys.shape:
            raise ConfigError("attention vectors must be (M, dim)")

    @property
    def size(self) -> int:
        return self.prompts.shape[0]

    @property
    def prompt_len(self) -> int:
        return self.prompts.shape[2]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def keys_trainable(self) -> bool:
        return self.strategy != TOPIC  # topic keys are permanently fixed

    def params(self) -> dict[str, np.ndarray]:
        out = {"pool.prompts": self.prompts, "pool.keys": self.keys}
        if self.attn is not None:
            out["pool.attn"] = self.attn
        return out

    def trainable_masks(self) -> dict[str, np.ndarray]:
        """Per-array update masks honouring entry freezes and key policy."""
        live = (~self.frozen).astype(self.prompts.dtype)
        masks = {"pool.prompts": live.reshape(-1, 1, 1, 1)}
        if self.keys_trainable:
            masks["pool.keys"] = live.reshape(-1, 1)
        else:
            masks["pool.keys"] = np.zeros((self.size, 1), dtype=self.keys.dtype)
        if self.attn is not None:
            masks["pool.attn"] = live.reshape(-1, 1)
        return masks

    def entry_digests(self) -> list[str]:
        out = []
        for i in range(self.size):
            parts = array_digest(self.prompts[i]) + array_digest(self.keys[i])
            if self.attn is not None:
                parts += array_digest(self.attn[i])
            out.append(parts)
        return out

    def frozen_digests(self) -> dict[int, str]:
        digests = self.entry_digests()
        return {i: digests[i] for i in range(self.size) if self.frozen[i]}


@dataclass
class SelectionResult:
    ids: np.ndarray                  # (N,) ascending by (distance, id)
    distances: np.ndarray            # (N,) matching the ids
    match_loss: float
    embedding: np.ndarray            # the selection embedding used
    weights: np.ndarray | None = None  # CODA alpha over all entries
    pool_version: int = 0


@dataclass
class SelectionRecord:
    corpus_id: int
    query_id: str
    prompt_ids: tuple[int, ...]
    distances: tuple[float, ...]


# ---------------------------------------------------------------------------
# selection (Eq-style top-N key matching)
# ---------------------------------------------------------------------------


def _key_distances(h: np.ndarray, pool: PromptPool) -> np.ndarray:
    hn = float(np.linalg.norm(h))
    if hn == 0.0:
        raise DomainError("selection embedding has zero norm")
    kn = np.linalg.norm(pool.keys, axis=1)
    if np.any(kn == 0.0):
        raise DomainError("prompt key with zero norm")
    return 1.0 - (pool.keys @ h) / (kn * hn)


def select_topn(h: np.ndarray, pool: PromptPool, forced_ids=None) -> SelectionResult:
    """Pick the top-N keys nearest to h by cosine distance.

    Ties break toward the lower entry id. ``forced_ids`` overrides the argmin
    (used when a strategy trains a designated pair); the matching loss is then
    summed over the forced entries instead.
    """
    if pool.size == 0:
        raise ContractError("selection over an empty pool")
    dists = _key_distances(h, pool)
    if forced_ids is not None:
        ids = np.asarray(forced_ids, dtype=np.intp)
    else:
        n = min(pool.top_n, pool.size)
        order = np.lexsort((np.arange(pool.size), dists))
        ids = order[:n]
    sel = dists[ids]
    return SelectionResult(
        ids=ids,
        distances=sel,
        match_loss=float(sel.sum()),
        embedding=h,
        pool_version=pool.version,
    )


def key_distance_matrix(hs: np.ndarray, pool: PromptPool) -> np.ndarray:
    """(B, M) cosine distances between selection embeddings and pool keys."""
    hn = np.linalg.norm(hs, axis=1)
    kn = np.linalg.norm(pool.keys, axis=1)
    if np.any(hn == 0.0):
        raise DomainError("selection embedding has zero norm")
    if np.any(kn == 0.0):
        raise DomainError("prompt key with zero norm")
    return 1.0 - (hs @ pool.keys.T) / (hn[:, None] * kn[None])


def select_topn_batch(hs: np.ndarray, pool: PromptPool, forced_ids=None):
    """Vectorized selection; returns (ids (B, N), distances (B, N)).

    Matches select_topn row by row: a stable sort on distance breaks ties
    toward the lower entry id."""
    if pool.size == 0:
        raise ContractError("selection over an empty pool")
    dists = key_distance_matrix(hs, pool)
    if forced_ids is not None:
        ids = np.broadcast_to(np.asarray(forced_ids, dtype=np.intp),
                              (hs.shape[0], len(forced_ids))).copy()
    else:
        n = min(pool.top_n, pool.size)
        ids = np.argsort(dists, axis=1, kind="stable")[:, :n]
    return ids, np.take_along_axis(dists, ids, axis=1)


def match_loss_grad(h: np.ndarray, pool: PromptPool, selection: SelectionResult):
    """Gradients of sum_{i in S} (1 - cos(h, k_i)) w.r.t. keys and h.

    The selection itself is a constant: gradients flow only through the
    cosine terms of the selected keys. Frozen keys, and all keys under the
    fixed-key strategy, receive zeros.
    """
    if selection.pool_version != pool.version:
        raise ContractError("selection is stale: pool changed since it was computed")
    d_keys = np.zeros_like(pool.keys)
    d_h = np.zeros_like(h)
    hn = float(np.linalg.norm(h))
    if hn == 0.0:
        raise DomainError("selection embedding has zero norm")
    for i in selection.ids:
        k = pool.keys[i]
        kn = float(np.linalg.norm(k))
        if kn == 0.0:
            raise DomainError("prompt key with zero norm")
        cos = float(np.dot(h, k) / (hn * kn))
        # d(1 - cos)/dk and /dh
        d_h += -(k / (hn * kn) - cos * h / (hn * hn))
        if pool.keys_trainable and not pool.frozen[i]:
            d_keys[i] += -(h / (hn * kn) - cos * k / (kn * kn))
    return {"keys": d_keys, "h": d_h}


# ---------------------------------------------------------------------------
# weighted composition (CODA)
# ---------------------------------------------------------------------------


def coda_compose(h: np.ndarray, pool: PromptPool):
    """Weighted sum of all prompts, alpha_i = cos(h * A_i, k_i).

    Returns (composed (n_prompt_layers, m, dim), alpha (M,)). Frozen entries
    contribute to the forward value; the backward pass zeroes their grads.
    """
    if pool.attn is None:
        raise ConfigError("composition requires a pool with attention vectors")
    composed, alpha = coda_compose_batch(h[None], pool)
    return composed[0], alpha[0]


def coda_compose_batch(hs: np.ndarray, pool: PromptPool):
    u = hs[:, None, :] * pool.attn[None]        # (B, M, d)
    nu = np.linalg.norm(u, axis=2)
    nk = np.linalg.norm(pool.keys, axis=1)
    if np.any(nu == 0.0) or np.any(nk == 0.0):
        raise DomainError("zero-norm vector in prompt weighting")
    alpha = np.einsum("bmd,md->bm", u, pool.keys) / (nu * nk[None])
    composed = np.einsum("bm,mpld->bpld", alpha, pool.prompts)
    return composed, alpha


def coda_compose_backward(d_composed: np.ndarray, hs: np.ndarray, pool: PromptPool, alpha: np.ndarray):
    """Backward of coda_compose_batch.

    d_composed is (B, n_prompt_layers, m, dim). Returns gradients for
    pool.prompts, pool.keys, pool.attn with frozen entries zeroed.
    """
    live = (~pool.frozen).astype(pool.prompts.dtype)
    d_alpha = np.einsum("bpld,mpld->bm", d_composed, pool.prompts)
    d_prompts = np.einsum("bm,bpld->mpld", alpha, d_composed)

    u = hs[:, None, :] * pool.attn[None]
    nu = np.linalg.norm(u, axis=2)                       # (B, M)
    nk = np.linalg.norm(pool.keys, axis=1)               # (M,)
    k = pool.keys[None]                                  # (1, M, d)
    cos = alpha
    # d cos(u, k)/du and /dk, per (b, m)
    du = k / (nu[..., None] * nk[None, :, None]) - cos[..., None] * u / (nu[..., None] ** 2)
    dk = u / (nu[..., None] * nk[None, :, None]) - cos[..., None] * k / (nk[None, :, None] ** 2)
    d_attn = np.einsum("bm,bmd->md", d_alpha, du * hs[:, None, :])
    d_keys = np.einsum("bm,bmd->md", d_alpha, dk)

    d_prompts *= live.reshape(-1, 1, 1, 1)
    d_keys *= live.reshape(-1, 1)
    d_attn *= live.reshape(-1, 1)
    return {"pool.prompts": d_prompts, "pool.keys": d_keys, "pool.attn": d_attn}


# ---------------------------------------------------------------------------
# prefix gathering
# ---------------------------------------------------------------------------


def gather_prefixes(pool: PromptPool, ids_batch: np.ndarray, prompt_layers: tuple[int, ...]):
    """Assemble per-query (p_k, p_v) pairs from selected entry ids.

    ids_batch is (B, N); selected prompts are concatenated along the length
    axis, key halves together and value halves together. Returns
    {layer: (p_k (B, N*m/2, d), p_v (B, N*m/2, d))}.
    """
    m2 = pool.prompt_len // 2
    picked = pool.prompts[ids_batch]  # (B, N, P, m, d)
    out = {}
    for j, layer in enumerate(prompt_layers):
        pk = picked[:, :, j, :m2, :]
        pv = picked[:, :, j, m2:, :]
        b, n_sel = pk.shape[0], pk.shape[1]
        out[layer] = (
            pk.reshape(b, n_sel * m2, -1),
            pv.reshape(b, n_sel * m2, -1),
        )
    return out


def scatter_prefix_grads(
    pool: PromptPool,
    ids_batch: np.ndarray,
    prompt_layers: tuple[int, ...],
    prefix_grads: dict[int, tuple[np.ndarray, np.ndarray]],
) -> np.ndarray:
    """Accumulate (d_pk, d_pv) per layer back into a (M, P, m, d) gradient.

    Frozen entries receive zeros.
    """
    m2 = pool.prompt_len // 2
    d_prompts = np.zeros_like(pool.prompts)
    b, n_sel = ids_batch.shape
    for j, layer in enumerate(prompt_layers):
        grad_pair = prefix_grads.get(layer)
        if grad_pair is None:
            continue
        dpk, dpv = grad_pair
        if dpk is None:
            continue
        dpk = dpk.reshape(b, n_sel, m2, -1)
        dpv = dpv.reshape(b, n_sel, m2, -1)
        for s in range(n_sel):
            col = ids_batch[:, s]
            for uid in np.unique(col):  # M is small; grouped sums beat add.at
                rows = col == uid
                d_prompts[uid, j, :m2, :] += dpk[rows, s].sum(axis=0)
                d_prompts[uid, j, m2:, :] += dpv[rows, s].sum(axis=0)
    live = (~pool.frozen).astype(pool.prompts.dtype)
    d_prompts *= live.reshape(-1, 1, 1, 1)
    return d_prompts


# ---------------------------------------------------------------------------
# allocation & freezing
# ---------------------------------------------------------------------------


def _init_prompts(n: int, n_layers: int, m: int, dim: int, rng, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(n, n_layers, m, dim)).astype(dtype)


def _init_keys(n: int, dim: int, rng, dtype) -> np.ndarray:
    k = rng.standard_normal((n, dim)).astype(dtype)
    return k / np.linalg.norm(k, axis=1, keepdims=True)


def _orthogonalized(new: np.ndarray, existing: np.ndarray) -> np.ndarray:
    """Gram-Schmidt new rows against existing rows, then renormalize.

    Once the basis spans the space (more entries than dimensions) residuals
    vanish; such rows keep their original unit direction instead of becoming
    degenerate zero keys."""
    out = new.copy()
    basis = [e / np.linalg.norm(e) for e in existing if np.linalg.norm(e) > 1e-12]
    for r in range(out.shape[0]):
        v = out[r].copy()
        for e in basis:
            v = v - np.dot(v, e) * e
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            out[r] = v / norm
            basis.append(out[r].copy())
        else:
            out[r] = out[r] / np.linalg.norm(out[r])
    return out.astype(new.dtype)


def allocate_for_timestep(
    pool: PromptPool | None,
    strategy: str,
    t: int,
    cfg: PoolConfig,
    dim: int,
    n_prompt_layers: int,
    rng: np.random.Generator,
    dtype=np.float64,
    topic_keys: np.ndarray | None = None,
) -> PromptPool:
    """Create or grow the pool for continual timestep ``t`` (t >= 1) and
    apply the strategy's freeze plan."""
    if t < 1:
        raise ContractError("prompt pools are allocated from timestep 1 onward")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown pool strategy {strategy!r}")

    if strategy == L2P:
        if pool is None:
            pool = PromptPool(
                strategy=L2P,
                prompts=_init_prompts(cfg.size, n_prompt_layers, cfg.prompt_len, dim, rng, dtype),
                keys=_init_keys(cfg.size, dim, rng, dtype),
                attn=None,
                frozen=np.zeros(cfg.size, dtype=bool),
                top_n=cfg.top_n,
                provenance=[SHARED] * cfg.size,
            )
        return pool

    if strategy == SPP:
        new_p = _init_prompts(1, n_prompt_layers, cfg.prompt_len, dim, rng, dtype)
        new_k = _init_keys(1, dim, rng, dtype)
        if pool is None:
            return PromptPool(
                strategy=SPP, prompts=new_p, keys=new_k, attn=None,
                frozen=np.zeros(1, dtype=bool), top_n=cfg.top_n, provenance=[t],
            )
        pool.frozen[:] = True
        pool.prompts = np.concatenate([pool.prompts, new_p])
        pool.keys = np.concatenate([pool.keys, new_k])
        pool.frozen = np.concatenate([pool.frozen, np.zeros(1, dtype=bool)])
        pool.provenance.append(t)
        pool.version += 1
        return pool

    if strategy == CODA:
        n_new = cfg.coda_prompts_per_task
        new_p = _init_prompts(n_new, n_prompt_layers, cfg.coda_prompt_len, dim, rng, dtype)
        new_k = _init_keys(n_new, dim, rng, dtype)
        new_a = _init_keys(n_new, dim, rng, dtype)
        if pool is None:
            new_k = _orthogonalized(new_k, np.zeros((0, dim), dtype=dtype))
            new_a = _orthogonalized(new_a, np.zeros((0, dim), dtype=dtype))
            return PromptPool(
                strategy=CODA, prompts=new_p, keys=new_k, attn=new_a,
                frozen=np.zeros(n_new, dtype=bool), top_n=cfg.top_n,
                provenance=[t] * n_new,
            )
        new_k = _orthogonalized(new_k, pool.keys)
        new_a = _orthogonalized(new_a, pool.attn)
        pool.frozen[:] = True
        pool.prompts = np.concatenate([pool.prompts, new_p])
        pool.keys = np.concatenate([pool.keys, new_k])
        pool.attn = np.concatenate([pool.attn, new_a])
        pool.frozen = np.concatenate([pool.frozen, np.zeros(n_new, dtype=bool)])
        pool.provenance.extend([t] * n_new)
        pool.version += 1
        return pool

    # TOPIC
    if pool is None:
        if topic_keys is None:
            raise ConfigError("topic strategy requires mined topic keys")
        g = topic_keys.shape[0]
        return PromptPool(
            strategy=TOPIC,
            prompts=_init_prompts(g, n_prompt_layers, cfg.prompt_len, dim, rng, dtype),
            keys=topic_keys.astype(dtype).copy(),
            attn=None,
            frozen=np.zeros(g, dtype=bool),
            top_n=cfg.top_n,
            provenance=list(range(g)),
        )
    if cfg.topic_freeze_after_first and t > 1:
        pool.frozen[:] = True
    return pool


# ---------------------------------------------------------------------------
# utilization
# ---------------------------------------------------------------------------


@dataclass
class UtilizationStats:
    pool_size: int
    counts: dict = field(default_factory=dict)           # (corpus, prompt) -> count
    per_corpus_totals: dict = field(default_factory=dict)
    total_events: int = 0

    @property
    def frequencies(self) -> dict[int, float]:
        if self.total_events == 0:
            return {}
        per_prompt: dict[int, int] = {}
        for (_, pid), c in self.counts.items():
            per_prompt[pid] = per_prompt.get(pid, 0) + c
        return {pid: c / self.total_events for pid, c in per_prompt.items()}

    @property
    def above_uniform(self) -> int:
        """Number of prompts whose overall selection share exceeds 1/M."""
        if self.pool_size == 0:
            return 0
        thr = 1.0 / self.pool_size
        return sum(1 for f in self.frequencies.values() if f > thr)

    @property
    def selected_fraction(self) -> float:
        if self.pool_size == 0:
            return 0.0
        return len(self.frequencies) / self.pool_size

    def rows(self) -> list[tuple[int, int, int]]:
        return sorted((c, p, n) for (c, p), n in self.counts.items())


def utilization_stats(records: list[SelectionRecord], pool_size: int) -> UtilizationStats:
    """Tally selection events per (corpus, prompt id). Empty logs are fine."""
    stats = UtilizationStats(pool_size=pool_size)
    for rec in records:
        for pid in rec.prompt_ids:
            key = (rec.corpus_id, int(pid))
            stats.counts[key] = stats.counts.get(key, 0) + 1
            stats.per_corpus_totals[rec.corpus_id] = stats.per_corpus_totals.get(rec.corpus_id, 0) + 1
            stats.total_events += 1
    return stats
