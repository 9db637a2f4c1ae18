"""Topic mining over initial-corpus document embeddings.

k-means (k-means++ seeding, deterministic empty-cluster repair) clusters the
document embeddings; unit-normalized centroids become fixed prompt keys. A
class-based TF-IDF pass labels each cluster with its most characteristic
terms: score(w, c) = tf(w, c) * log(1 + avg_tokens_per_cluster / f(w)),
where tf counts w inside cluster c's concatenated text and f(w) counts w
across all clusters.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

KMEANS_MAX_ITERS = 100


@dataclass
class TopicModel:
    centroids: np.ndarray                       # (G, dim), unit-norm
    assignments: np.ndarray                     # (n_docs,) topic id per doc
    doc_ids: list[str]                          # aligned with assignments
    top_terms: list[list[tuple[int, float]]]    # per topic: (token, score)
    objective_history: list[float]              # k-means objective per iteration

    @property
    def num_topics(self) -> int:
        return self.centroids.shape[0]

    def to_json(self) -> dict:
        return {
            "num_topics": self.num_topics,
            "topics": [
                {
                    "centroid": [float(x) for x in self.centroids[g]],
                    "top_terms": [[int(t), float(s)] for t, s in self.top_terms[g]],
                }
                for g in range(self.num_topics)
            ],
            "assignments": {d: int(a) for d, a in zip(self.doc_ids, self.assignments)},
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def from_json(cls, obj: dict) -> "TopicModel":
        centroids = np.asarray([t["centroid"] for t in obj["topics"]], dtype=np.float64)
        doc_ids = list(obj["assignments"].keys())
        assignments = np.asarray([obj["assignments"][d] for d in doc_ids], dtype=np.intp)
        top_terms = [[(int(t), float(s)) for t, s in topic["top_terms"]] for topic in obj["topics"]]
        return cls(centroids=centroids, assignments=assignments, doc_ids=doc_ids,
                   top_terms=top_terms, objective_history=[])

    @classmethod
    def load(cls, path) -> "TopicModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total == 0.0:
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator):
    """Lloyd iterations with k-means++ seeding.

    Converges when assignments stop changing (cap 100 iterations). An empty
    cluster is repaired deterministically by re-seeding its centroid at the
    point farthest from its current centroid. Returns
    (centroids, assignments, objective_history); the objective is the sum of
    squared distances to assigned centroids, non-increasing across iterations.
    """
    n = x.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k={k} must be in [1, {n}]")
    centroids = _plusplus_seed(x, k, rng)
    assignments = np.full(n, -1, dtype=np.intp)
    history: list[float] = []
    for _ in range(KMEANS_MAX_ITERS):
        d2 = ((x[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        for j in range(k):
            members = x[new_assign == j]
            if members.shape[0] == 0:
                # farthest point from its own centroid claims the empty slot
                far = int(d2[np.arange(n), new_assign].argmax())
                centroids[j] = x[far]
                new_assign[far] = j
            else:
                centroids[j] = members.mean(axis=0)
        if np.array_equal(new_assign, assignments):
            assignments = new_assign
            break
        assignments = new_assign
    return centroids, assignments, history


def mine_topics(
    doc_embeddings: np.ndarray,
    doc_ids: list[str],
    num_topics: int,
    seed_rng: np.random.Generator,
    doc_tokens: list[list[int]] | None = None,
    top_k_terms: int = 10,
) -> TopicModel:
    """Cluster document embeddings into topics with fixed unit-norm centroids.

    ``doc_tokens`` (one token list per document, aligned with ``doc_ids``)
    enables the c-TF-IDF term labels; without it topics are unlabeled.
    """
    x = np.asarray(doc_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != len(doc_ids):
        raise DataError("doc_embeddings must be (n_docs, dim) aligned with doc_ids")
    if num_topics > x.shape[0]:
        raise ConfigError(f"{num_topics} topics for {x.shape[0]} documents")
    centroids, assignments, history = kmeans(x, num_topics, seed_rng)
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DataError("degenerate all-zero cluster centroid")
    centroids = centroids / norms
    if doc_tokens is not None:
        terms = ctfidf_terms(assignments, doc_tokens, num_topics, top_k_terms)
    else:
        terms = [[] for _ in range(num_topics)]
    return TopicModel(
        centroids=centroids,
        assignments=assignments,
        doc_ids=list(doc_ids),
        top_terms=terms,
        objective_history=history,
    )


# ---------------------------------------------------------------------------
# class-based TF-IDF
# ---------------------------------------------------------------------------


def ctfidf_terms(
    assignments: np.ndarray,
    doc_tokens: list[list[int]],
    num_clusters: int,
    top_k: int,
) -> list[list[tuple[int, float]]]:
    """Rank each cluster's terms by tf(w, c) * log(1 + avg_len / f(w))."""
    tf: list[dict[int, int]] = [dict() for _ in range(num_clusters)]
    total: dict[int, int] = {}
    cluster_sizes = np.zeros(num_clusters)
    for c, tokens in zip(assignments, doc_tokens):
        cluster_sizes[c] += len(tokens)
        bucket = tf[c]
        for w in tokens:
            bucket[w] = bucket.get(w, 0) + 1
            total[w] = total.get(w, 0) + 1
    avg_len = cluster_sizes.mean() if num_clusters else 0.0
    ranked = []
    for c in range(num_clusters):
        scored = [
            (w, count * np.log1p(avg_len / total[w]))
            for w, count in tf[c].items()
        ]
        scored.sort(key=lambda ws: (-ws[1], ws[0]))
        ranked.append([(int(w), float(s)) for w, s in scored[:top_k]])
    return ranked


def topic_keys(model: TopicModel) -> np.ndarray:
    """The fixed prompt keys: unit-norm centroids in topic-id order."""
    return model.centroids.copy()
