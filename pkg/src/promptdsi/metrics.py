"""Retrieval metrics, continual-learning metrics, and size accounting.

P[t][i] is the performance on corpus i's test queries after training on
corpus t (lower-triangular). With t > 0:

    A_t  = (1/t) * sum_{i=1..t} P[t][i]          (average performance)
    LA_t = (1/t) * sum_{i=1..t} P[i][i]          (learning performance)
    F_t  = (1/t) * sum_{i=0..t-1} max_{i'<=t-1} (P[i'][i] - P[t][i])

A_t and LA_t average over the new corpora only; F_t's sum includes the
initial corpus. The dedicated initial-corpus forgetting figure is
max(P[t][0] - P[0][0], 0).
"""

import csv
from dataclasses import dataclass, field

from .errors import ContractError
from .retrieval import RankedList

METRICS = ("hits@1", "hits@10", "mrr@10")


def hits_at_k(ranked: RankedList, gold: int, k: int) -> int:
    """1 iff the gold docid appears among the first k entries."""
    if k > len(ranked):
        raise ContractError(f"k={k} exceeds ranked list of length {len(ranked)}")
    return int(any(docid == gold for docid, _ in ranked[:k]))


def mrr_at_k(ranked: RankedList, gold: int, k: int = 10) -> float:
    """1/rank when the gold docid is within the top k, else 0."""
    if k > len(ranked):
        raise ContractError(f"k={k} exceeds ranked list of length {len(ranked)}")
    for pos, (docid, _) in enumerate(ranked[:k], start=1):
        if docid == gold:
            return 1.0 / pos
    return 0.0


@dataclass
class PerfMatrix:
    metric: str
    values: dict = field(default_factory=dict)  # (t, i) -> float

    def set(self, t: int, i: int, value: float) -> None:
        if i > t:
            raise ContractError(f"P[{t}][{i}] is above the diagonal")
        self.values[(t, i)] = float(value)

    def get(self, t: int, i: int) -> float:
        try:
            return self.values[(t, i)]
        except KeyError:
            raise ContractError(f"P[{t}][{i}] was never evaluated") from None

    def has(self, t: int, i: int) -> bool:
        return (t, i) in self.values

    @property
    def max_t(self) -> int:
        return max((t for t, _ in self.values), default=-1)

    def rows(self) -> list[tuple[int, int, float]]:
        return sorted((t, i, v) for (t, i), v in self.values.items())


def cl_metrics(perf: PerfMatrix, t: int) -> dict:
    """A_t, LA_t, F_t and initial-corpus forgetting at timestep t.

    At t = 0 the three continual metrics are undefined and returned as None.
    """
    if t == 0:
        return {"A_t": None, "LA_t": None, "F_t": None, "forgetting_d0": 0.0}
    a = sum(perf.get(t, i) for i in range(1, t + 1)) / t
    la = sum(perf.get(i, i) for i in range(1, t + 1)) / t
    # per-corpus drop from the running maximum, floored at zero so F_t is 0
    # exactly when every P[t][i] is the running maximum
    f = sum(
        max(max(perf.get(ip, i) for ip in range(i, t)) - perf.get(t, i), 0.0)
        for i in range(0, t)
    ) / t
    forget0 = max(perf.get(t, 0) - perf.get(0, 0), 0.0)
    return {"A_t": a, "LA_t": la, "F_t": f, "forgetting_d0": forget0}


def write_perf_csv(path, matrices: dict[str, PerfMatrix]) -> None:
    """One row per (t, i, metric), deterministic ordering and formatting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "i", "metric", "value"])
        for name in sorted(matrices):
            for t, i, v in matrices[name].rows():
                w.writerow([t, i, name, repr(v)])


def read_perf_csv(path) -> dict[str, PerfMatrix]:
    matrices: dict[str, PerfMatrix] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            m = matrices.setdefault(row["metric"], PerfMatrix(metric=row["metric"]))
            m.set(int(row["t"]), int(row["i"]), float(row["value"]))
    return matrices


# ---------------------------------------------------------------------------
# size accounting
# ---------------------------------------------------------------------------


def memory_accounting(dim: int, pool_size: int, prompt_len: int, bytes_per_float: int,
                      cache_doc_count: int | None = None) -> dict:
    """Byte counts for the prompt memory and the query-embedding cache.

    The pool stores M prompts of (dim x m) plus M keys of dim, i.e.
    dim * M * (m + 1) floats; the cache stores one dim-vector per document.
    KiB/MiB figures use 1024-based units.
    """
    if min(dim, bytes_per_float) < 1 or pool_size < 0 or prompt_len < 0:
        raise ContractError("accounting arguments must be positive")
    pool_bytes = dim * pool_size * (prompt_len + 1) * bytes_per_float
    out = {
        "pool_bytes": pool_bytes,
        "pool_kib": pool_bytes / 1024.0,
        "pool_mib": pool_bytes / 1024.0**2,
    }
    if cache_doc_count is not None:
        cache_bytes = dim * cache_doc_count * bytes_per_float
        out.update({
            "cache_bytes": cache_bytes,
            "cache_kib": cache_bytes / 1024.0,
            "cache_mib": cache_bytes / 1024.0**2,
        })
    return out


def params_accounting(registry, dim: int, pool=None, t_start: int = 1,
                      t_end: int | None = None) -> int:
    """Trainable scalar parameters over the continual phase: classifier
    columns of segments [t_start, t_end] plus every pool tensor that trains
    at any of those timesteps (counted once)."""
    if t_end is None:
        t_end = len(registry.segments) - 1
    total = 0
    for t in range(t_start, t_end + 1):
        start, end = registry.segments[t]
        total += (end - start) * dim
    if pool is None:
        return total
    per_layer = pool.prompts.shape[1]
    prompt_scalars = per_layer * pool.prompt_len * pool.dim
    for i in range(pool.size):
        prov = pool.provenance[i]
        # shared entries (L2P / TOPIC) train at every timestep; per-timestep
        # entries (SPP / CODA) train only at their own allocation step
        trains_in_phase = prov < 0 or t_start <= prov <= t_end
        if pool.strategy == "TOPIC":
            trains_in_phase = True
        if not trains_in_phase:
            continue
        total += prompt_scalars
        if pool.keys_trainable:
            total += pool.dim
        if pool.attn is not None:
            total += pool.dim
    return total
