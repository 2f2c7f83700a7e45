"""Synthetic desk-scale collections with a planted relevance rule.

``lexical``
    Queries are grouped under rare topic words (several queries per topic,
    padded with common words). A document is relevant iff it contains the
    query's topic word, so BM25 alone ranks perfectly. Documents about other
    topics serve as the negatives.

``interaction``
    Words are entities (``entN``), attributes (``attN``) and fillers. Each
    query is an ``entI attJ`` pair, and documents are strings of such pairs
    taken from the query set, separated by fillers. A document is relevant to
    ``entI attJ`` iff it mentions exactly one of the two words. Lexical
    overlap is then anti-correlated with relevance within the candidate pool
    and BM25 cannot separate the classes; a model has to look at which query
    words the document does and does not contain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .retrieval import Document, Qrels

MIN_QUERIES = 20
MIN_DOCS = 200


@dataclass
class SynthCollection:
    corpus: list[Document]
    queries: dict[str, str]
    qrels: Qrels
    kind: str


def _ids(prefix: str, n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _check(n_queries: int, n_docs: int) -> None:
    if n_queries < MIN_QUERIES or n_docs < MIN_DOCS:
        raise UsageError(f"synthetic collections need >= {MIN_QUERIES} queries and >= {MIN_DOCS} docs")


def lexical(n_queries: int = 50, n_docs: int = 500, seed: int = 0, queries_per_topic: int = 5,
            rel_per_topic: int | None = None, common_words: int = 20, doc_len: int = 20) -> SynthCollection:
    """By default every document carries exactly one topic word."""
    _check(n_queries, n_docs)
    n_topics = -(-n_queries // queries_per_topic)
    if rel_per_topic is None:
        rel_per_topic = n_docs // n_topics
    if n_topics * rel_per_topic > n_docs:
        raise UsageError("not enough documents for the requested relevant set sizes")
    rng = np.random.default_rng(seed)
    common = _ids("w", common_words)
    topics = _ids("topic", n_topics)
    qids = _ids("q", n_queries)
    topic_of = rng.permutation(np.arange(n_queries) % n_topics)
    owner = np.full(n_docs, -1)
    slots = rng.permutation(n_docs)[: n_topics * rel_per_topic]
    owner[slots] = np.repeat(np.arange(n_topics), rel_per_topic)
    corpus, qrels = [], Qrels()
    for i, did in enumerate(_ids("d", n_docs)):
        words = list(rng.choice(common, size=doc_len))
        if owner[i] >= 0:
            words[int(rng.integers(doc_len))] = topics[owner[i]]
            for qi in np.flatnonzero(topic_of == owner[i]).tolist():
                qrels.add(qids[qi], did, 1)
        corpus.append(Document(did, " ".join(words)))
    queries = {qid: " ".join([topics[topic_of[qi]], *rng.choice(common, size=2)]) for qi, qid in enumerate(qids)}
    return SynthCollection(corpus, queries, qrels, "lexical")


def _grid(n_queries: int) -> tuple[int, int]:
    n_ent = max(2, int(round(math.sqrt(n_queries / 2))))
    return n_ent, -(-n_queries // n_ent)


def interaction(n_queries: int = 50, n_docs: int = 500, seed: int = 0, n_entities: int | None = None,
                n_attributes: int | None = None, pairs_per_doc: int = 2, fillers: int = 20,
                max_gap: int = 1) -> SynthCollection:
    _check(n_queries, n_docs)
    if n_entities is None or n_attributes is None:
        n_entities, n_attributes = _grid(n_queries)
    if n_queries > n_entities * n_attributes:
        raise UsageError("more queries than distinct entity/attribute pairs")
    rng = np.random.default_rng(seed)
    ents, atts, fill = _ids("ent", n_entities), _ids("att", n_attributes), _ids("fil", fillers)
    # documents only use query pairs, so no word is a query-independent hint
    pairs = rng.permutation(n_entities * n_attributes)[:n_queries].tolist()
    qids = _ids("q", n_queries)
    qwords = [(ents[p // n_attributes], atts[p % n_attributes]) for p in pairs]
    queries = {qid: f"{e} {a}" for qid, (e, a) in zip(qids, qwords)}
    corpus, qrels = [], Qrels()
    for did in _ids("d", n_docs):
        words = []
        for k in rng.integers(n_queries, size=pairs_per_doc).tolist():
            words.extend(rng.choice(fill, size=int(rng.integers(max_gap + 1))).tolist())
            words.extend(qwords[k])
        words.extend(rng.choice(fill, size=int(rng.integers(max_gap + 1))).tolist())
        present = set(words)
        for qid, (e, a) in zip(qids, qwords):
            if (e in present) != (a in present):
                qrels.add(qid, did, 1)
        corpus.append(Document(did, " ".join(words)))
    for qid in qids:
        qrels.judgments.setdefault(qid, {})
    return SynthCollection(corpus, queries, qrels, "interaction")


def generate(kind: str, n_queries: int = 50, n_docs: int = 500, seed: int = 0) -> SynthCollection:
    if kind == "lexical":
        return lexical(n_queries, n_docs, seed)
    if kind == "interaction":
        return interaction(n_queries, n_docs, seed)
    raise UsageError(f"unknown synthetic kind {kind!r}")
