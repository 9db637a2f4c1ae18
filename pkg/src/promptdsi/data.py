"""Synthetic topic-structured corpora and JSONL ingestion.

The generator is the desk-scale stand-in for a large retrieval collection: an
initial corpus plus a sequence of small increments, all drawing documents
from one shared set of latent topics. Every document carries a few globally
unique entity tokens that appear in each of its queries, which is what makes
query -> document mapping learnable at tiny scale. Pseudo queries are
independent resamples of the same construction (the stand-in for a query
generation model); natural queries are split into train/val/test and test
sets contain natural queries only.

Token ids are integers; id 0 is reserved for the encoder's CLS token and
never appears in any document or query.
"""

import gzip
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .seeding import named_rng

TRAIN, VAL, TEST = "train", "val", "test"
NATURAL, PSEUDO = "natural", "pseudo"


@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 1024
    num_topics: int = 8
    docs_initial: int = 200
    docs_per_increment: int = 20
    num_increments: int = 5
    entity_tokens_per_doc: int = 2
    body_len: int = 60
    natural_queries_per_doc: int = 5
    pseudo_queries_per_doc: int = 10
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    terms_per_topic: int = 30
    common_terms: int = 20
    seed: int = 0

    @property
    def total_docs(self) -> int:
        return self.docs_initial + self.docs_per_increment * self.num_increments

    def validate(self) -> None:
        if min(self.docs_initial, self.docs_per_increment, self.num_increments) < 1:
            raise ConfigError("corpus sizes must be positive")
        if self.natural_queries_per_doc < 3:
            raise ConfigError("need at least 3 natural queries per doc to fill all splits")
        if self.entity_tokens_per_doc < 1:
            raise ConfigError("documents need at least one entity token")
        if not 0 < self.train_fraction + self.val_fraction < 1:
            raise ConfigError("train+val fractions must leave room for a test split")
        needed = 1 + self.total_docs * self.entity_tokens_per_doc \
            + self.num_topics * self.terms_per_topic + self.common_terms
        if needed > self.vocab_size:
            raise ConfigError(
                f"vocab of {self.vocab_size} too small: {needed} ids needed for "
                "CLS + entities + topic terms"
            )

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        return cls(**obj)


@dataclass
class DocRecord:
    doc_id: str
    corpus: int
    tokens: list[int]


@dataclass
class QueryRecord:
    query_id: str
    doc_id: str
    corpus: int
    split: str
    kind: str
    tokens: list[int]


@dataclass
class Corpus:
    index: int
    docs: list[DocRecord] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.docs]

    def queries_of(self, split: str, kinds=(NATURAL, PSEUDO)) -> list[QueryRecord]:
        return [q for q in self.queries if q.split == split and q.kind in kinds]


@dataclass
class CorpusTimeline:
    corpora: list[Corpus] = field(default_factory=list)

    @property
    def num_timesteps(self) -> int:
        return len(self.corpora)

    def corpus(self, t: int) -> Corpus:
        return self.corpora[t]

    def all_docs(self) -> list[DocRecord]:
        return [d for c in self.corpora for d in c.docs]

    def validate(self) -> None:
        seen: set[str] = set()
        for c in self.corpora:
            for d in c.docs:
                if d.doc_id in seen:
                    raise DataError(f"doc id {d.doc_id!r} appears in more than one corpus")
                seen.add(d.doc_id)
            for q in c.queries:
                if q.split == TEST and q.kind != NATURAL:
                    raise DataError(f"test query {q.query_id!r} is not natural-kind")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _vocab_layout(spec: SyntheticSpec):
    ent_start = 1
    ent_end = ent_start + spec.total_docs * spec.entity_tokens_per_doc
    topic_slices = []
    cursor = ent_end
    for _ in range(spec.num_topics):
        topic_slices.append(np.arange(cursor, cursor + spec.terms_per_topic))
        cursor += spec.terms_per_topic
    common = np.arange(cursor, cursor + spec.common_terms)
    return ent_start, topic_slices, common


def _make_query(rng, entities, body_terms) -> list[int]:
    n_ent = int(rng.integers(1, min(2, len(entities)) + 1))
    ents = rng.choice(entities, size=n_ent, replace=False)
    n_terms = int(rng.integers(3, 9))
    terms = rng.choice(body_terms, size=n_terms, replace=True)
    toks = np.concatenate([ents, terms])
    return [int(x) for x in rng.permutation(toks)]


def generate_corpora(spec: SyntheticSpec) -> CorpusTimeline:
    """Deterministic timeline for (spec, spec.seed).

    Each document draws from its own derived sub-streams, so documents can be
    generated in any order (or in parallel) without changing the output."""
    spec.validate()
    ent_start, topic_slices, common = _vocab_layout(spec)
    timeline = CorpusTimeline()
    next_entity = ent_start
    sizes = [spec.docs_initial] + [spec.docs_per_increment] * spec.num_increments

    for t, n_docs in enumerate(sizes):
        corpus = Corpus(index=t)
        for d in range(n_docs):
            doc_id = f"d{t}_{d}"
            doc_rng = named_rng(spec.seed, f"data:doc:{doc_id}")
            nat_rng = named_rng(spec.seed, f"data:nat:{doc_id}")
            pseudo_rng = named_rng(spec.seed, f"data:pseudo:{doc_id}")
            split_rng = named_rng(spec.seed, f"data:split:{doc_id}")

            topic = int(doc_rng.integers(spec.num_topics))
            entities = list(range(next_entity, next_entity + spec.entity_tokens_per_doc))
            next_entity += spec.entity_tokens_per_doc
            pool = np.concatenate([topic_slices[topic], common])
            # topical body with the entities embedded at random positions
            body = doc_rng.choice(pool, size=spec.body_len, replace=True)
            slots = doc_rng.choice(spec.body_len, size=len(entities), replace=False)
            body[slots] = entities
            corpus.docs.append(DocRecord(doc_id=doc_id, corpus=t, tokens=[int(x) for x in body]))

            body_terms = np.asarray([x for x in body if x not in entities])
            nat = [_make_query(nat_rng, entities, body_terms) for _ in range(spec.natural_queries_per_doc)]
            n_train = max(1, round(spec.train_fraction * len(nat)))
            n_val = max(1, round(spec.val_fraction * len(nat)))
            if n_train + n_val >= len(nat):
                n_val = max(1, len(nat) - n_train - 1)
            order = split_rng.permutation(len(nat))
            for j, qi in enumerate(order):
                split = TRAIN if j < n_train else (VAL if j < n_train + n_val else TEST)
                corpus.queries.append(QueryRecord(
                    query_id=f"q{t}_{d}_n{qi}", doc_id=doc_id, corpus=t,
                    split=split, kind=NATURAL, tokens=nat[qi],
                ))
            for j in range(spec.pseudo_queries_per_doc):
                corpus.queries.append(QueryRecord(
                    query_id=f"q{t}_{d}_p{j}", doc_id=doc_id, corpus=t,
                    split=TRAIN, kind=PSEUDO,
                    tokens=_make_query(pseudo_rng, entities, body_terms),
                ))
        timeline.corpora.append(corpus)

    _enforce_split_hygiene(timeline, spec)
    timeline.validate()
    return timeline


def _enforce_split_hygiene(timeline: CorpusTimeline, spec: SyntheticSpec) -> None:
    """No test query token sequence may appear verbatim in a training split."""
    fix_rng = named_rng(spec.seed, "data:hygiene")
    trainable = {
        tuple(q.tokens)
        for c in timeline.corpora
        for q in c.queries
        if q.split in (TRAIN, VAL)
    }
    _, topic_slices, common = _vocab_layout(spec)
    extra = np.concatenate(topic_slices + [common])
    for c in timeline.corpora:
        for q in c.queries:
            if q.split != TEST:
                continue
            guard = 0
            while tuple(q.tokens) in trainable:
                # swap one token for a fresh topical term until distinct
                pos = int(fix_rng.integers(len(q.tokens)))
                q.tokens[pos] = int(fix_rng.choice(extra))
                guard += 1
                if guard > 100:
                    raise DataError(f"could not de-collide test query {q.query_id!r}")


# ---------------------------------------------------------------------------
# JSONL round trip
# ---------------------------------------------------------------------------


def _open(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save_jsonl(timeline: CorpusTimeline, path) -> None:
    """Documents first, then queries, both in timeline order."""
    with _open(path, "w") as f:
        for c in timeline.corpora:
            for d in c.docs:
                f.write(json.dumps(
                    {"doc_id": d.doc_id, "corpus": d.corpus, "tokens": d.tokens},
                    sort_keys=True) + "\n")
        for c in timeline.corpora:
            for q in c.queries:
                f.write(json.dumps(
                    {"query_id": q.query_id, "doc_id": q.doc_id, "corpus": q.corpus,
                     "split": q.split, "kind": q.kind, "tokens": q.tokens},
                    sort_keys=True) + "\n")


def load_jsonl(path) -> CorpusTimeline:
    corpora: dict[int, Corpus] = {}
    seen_docs: set[str] = set()
    try:
        handle = _open(path, "r")
    except FileNotFoundError:
        raise DataError(f"corpus file {path} not found") from None
    with handle as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed JSON ({e})") from None
            try:
                t = int(obj["corpus"])
                corpus = corpora.setdefault(t, Corpus(index=t))
                if "query_id" in obj:
                    corpus.queries.append(QueryRecord(
                        query_id=obj["query_id"], doc_id=obj["doc_id"], corpus=t,
                        split=obj["split"], kind=obj["kind"],
                        tokens=[int(x) for x in obj["tokens"]],
                    ))
                else:
                    if obj["doc_id"] in seen_docs:
                        raise DataError(f"{path}:{lineno}: duplicate doc id {obj['doc_id']!r}")
                    seen_docs.add(obj["doc_id"])
                    corpus.docs.append(DocRecord(
                        doc_id=obj["doc_id"], corpus=t,
                        tokens=[int(x) for x in obj["tokens"]],
                    ))
            except KeyError as e:
                raise DataError(f"{path}:{lineno}: missing field {e}") from None
    timeline = CorpusTimeline(corpora=[corpora[t] for t in sorted(corpora)])
    timeline.validate()
    return timeline
