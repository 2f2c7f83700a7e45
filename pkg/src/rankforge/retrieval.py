"""Corpus ingestion, BM25 first-stage retrieval, triplet sampling and folds."""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoder import split_words
from .errors import InputError, ParseError

log = logging.getLogger(__name__)

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class Triplet:
    query_id: str
    query_text: str
    pos_doc_id: str
    pos_text: str
    neg_doc_id: str
    neg_text: str


class Qrels:
    """Graded judgments; unjudged pairs have relevance 0."""

    def __init__(self, judgments: Mapping[str, Mapping[str, int]] | None = None):
        self.judgments: dict[str, dict[str, int]] = {q: dict(d) for q, d in (judgments or {}).items()}

    def add(self, query_id: str, doc_id: str, rel: int) -> None:
        if rel < 0:
            raise InputError(f"negative relevance for ({query_id}, {doc_id})")
        self.judgments.setdefault(query_id, {})[doc_id] = rel

    def get(self, query_id: str, doc_id: str) -> int:
        return self.judgments.get(query_id, {}).get(doc_id, 0)

    def query_ids(self) -> list[str]:
        return sorted(self.judgments)

    def relevant(self, query_id: str) -> list[str]:
        return sorted(d for d, r in self.judgments.get(query_id, {}).items() if r > 0)

    def __contains__(self, query_id: str) -> bool:
        return query_id in self.judgments

    def __getitem__(self, query_id: str) -> dict[str, int]:
        return self.judgments.get(query_id, {})


# -- file formats ---------------------------------------------------------------


def read_corpus(path) -> list[Document]:
    docs, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                doc = Document(str(obj["doc_id"]), str(obj["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"bad corpus record: {exc}", n) from exc
            if not doc.doc_id:
                raise ParseError("empty doc_id", n)
            if doc.doc_id in seen:
                raise InputError(f"duplicate doc_id {doc.doc_id!r} (line {n})")
            seen.add(doc.doc_id)
            docs.append(doc)
    return docs


def write_corpus(docs: Iterable[Document], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in docs:
            fh.write(json.dumps({"doc_id": d.doc_id, "text": d.text}, ensure_ascii=False) + "\n")


def read_queries(path) -> dict[str, str]:
    queries = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise ParseError("expected query_id<TAB>query_text", n)
            queries[parts[0]] = parts[1]
    return queries


def write_queries(queries: Mapping[str, str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, text in queries.items():
            fh.write(f"{qid}\t{text}\n")


def read_qrels(path) -> Qrels:
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError("expected 'query_id 0 doc_id relevance'", n)
            try:
                rel = int(parts[3])
            except ValueError as exc:
                raise ParseError(f"relevance {parts[3]!r} is not an integer", n) from exc
            if rel < 0:
                raise ParseError("relevance must be >= 0", n)
            qrels.add(parts[0], parts[2], rel)
    return qrels


def write_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in qrels.query_ids():
            for doc_id, rel in sorted(qrels[qid].items()):
                fh.write(f"{qid} 0 {doc_id} {rel}\n")


# -- BM25 -------------------------------------------------------------------------


class BM25Index:
    def __init__(self, doc_ids: list[str], doc_len: list[int], postings: dict[str, list[tuple[int, int]]],
                 k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.doc_ids = doc_ids
        self.doc_len = np.asarray(doc_len, dtype=np.int64)
        self.postings = postings
        self.k1 = float(k1)
        self.b = float(b)
        self.N = len(doc_ids)
        self.avgdl = float(self.doc_len.sum()) / self.N if self.N else 0.0
        self._arrays = {t: (np.array([p[0] for p in ps], dtype=np.int64), np.array([p[1] for p in ps], dtype=np.float64))
                        for t, ps in postings.items()}

    @classmethod
    def build(cls, corpus: Iterable[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> "BM25Index":
        doc_ids, doc_len, postings, seen = [], [], {}, set()
        for i, doc in enumerate(corpus):
            if doc.doc_id in seen:
                raise InputError(f"duplicate doc_id {doc.doc_id!r}")
            seen.add(doc.doc_id)
            words = split_words(doc.text)
            doc_ids.append(doc.doc_id)
            doc_len.append(len(words))
            for term, tf in Counter(words).items():
                postings.setdefault(term, []).append((i, tf))
        if not doc_ids:
            raise InputError("cannot index an empty corpus")
        return cls(doc_ids, doc_len, postings, k1, b)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.N - df + 0.5) / (df + 0.5) + 1.0)

    def score_all(self, query_text: str) -> np.ndarray:
        scores = np.zeros(self.N)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avgdl) if self.avgdl > 0 else np.full(self.N, self.k1 * (1.0 - self.b))
        for term in split_words(query_text):
            if term not in self._arrays:
                continue
            docs, tf = self._arrays[term]
            scores[docs] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[docs])
        return scores

    def topk(self, query_text: str, k: int) -> list[tuple[str, float]]:
        if k < 1:
            raise InputError("k must be >= 1")
        scores = self.score_all(query_text)
        hits = np.nonzero(scores > 0)[0]
        ranked = sorted(hits.tolist(), key=lambda i: (-scores[i], self.doc_ids[i]))
        return [(self.doc_ids[i], float(scores[i])) for i in ranked[:k]]

    # -- binary format: b"BMIX" | u32 version | f64 k1 | f64 b | vocab | postings | doc table

    def dumps(self) -> bytes:
        out = [b"BMIX", struct.pack("<Idd", 1, self.k1, self.b)]
        terms = sorted(self.postings)
        out.append(struct.pack("<I", len(terms)))
        for t in terms:
            raw = t.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw)
        for t in terms:
            ps = self.postings[t]
            out.append(struct.pack("<I", len(ps)))
            out.append(np.asarray(ps, dtype="<u4").tobytes())
        out.append(struct.pack("<I", self.N))
        for doc_id, n in zip(self.doc_ids, self.doc_len.tolist()):
            raw = doc_id.encode("utf-8")
            out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<I", n))
        return b"".join(out)

    @classmethod
    def loads(cls, blob: bytes) -> "BM25Index":
        if blob[:4] != b"BMIX":
            raise InputError("not a BM25 index file (bad magic)")
        try:
            version, k1, b = struct.unpack_from("<Idd", blob, 4)
            if version != 1:
                raise InputError(f"unsupported index version {version}")
            pos = 24
            (n_terms,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            terms = []
            for _ in range(n_terms):
                (ln,) = struct.unpack_from("<H", blob, pos)
                terms.append(blob[pos + 2 : pos + 2 + ln].decode("utf-8"))
                pos += 2 + ln
            postings = {}
            for t in terms:
                (cnt,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                arr = np.frombuffer(blob, dtype="<u4", count=2 * cnt, offset=pos).reshape(cnt, 2)
                postings[t] = [(int(d), int(f)) for d, f in arr]
                pos += 8 * cnt
            (n_docs,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            doc_ids, doc_len = [], []
            for _ in range(n_docs):
                (ln,) = struct.unpack_from("<H", blob, pos)
                doc_ids.append(blob[pos + 2 : pos + 2 + ln].decode("utf-8"))
                (n,) = struct.unpack_from("<I", blob, pos + 2 + ln)
                doc_len.append(n)
                pos += 6 + ln
        except struct.error as exc:
            raise InputError(f"truncated index file: {exc}") from exc
        return cls(doc_ids, doc_len, postings, k1, b)

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "BM25Index":
        return cls.loads(Path(path).read_bytes())


def build_index(corpus: Iterable[Document], k1: float = DEFAULT_K1, b: float = DEFAULT_B) -> BM25Index:
    return BM25Index.build(corpus, k1, b)


def bm25_topk(index: BM25Index, query_text: str, k: int) -> list[tuple[str, float]]:
    return index.topk(query_text, k)


# -- training data ------------------------------------------------------------------


def sample_triplets(index: BM25Index, qrels: Qrels, queries: Mapping[str, str], docs: Mapping[str, str],
                    top_k: int = 100, per_query: int = 10, seed: int = 0) -> list[Triplet]:
    """Pick (positive, negative) pairs per query from its BM25 top-k pool.

    Positives fall back to every judged-relevant document when the pool holds
    none. Distinct pairs are drawn while enough exist.
    """
    if top_k < 1:
        raise InputError("top_k must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for qid in sorted(queries):
        pool = [d for d, _ in index.topk(queries[qid], top_k)]
        pos = [d for d in pool if qrels.get(qid, d) > 0] or qrels.relevant(qid)
        neg = [d for d in pool if qrels.get(qid, d) == 0]
        if not pos or not neg:
            log.warning("query %s skipped: %d positives, %d negatives", qid, len(pos), len(neg))
            continue
        n_pairs = len(pos) * len(neg)
        picks = rng.choice(n_pairs, size=per_query, replace=per_query > n_pairs)
        for p in picks.tolist():
            pd_, nd = pos[p // len(neg)], neg[p % len(neg)]
            out.append(Triplet(qid, queries[qid], pd_, docs[pd_], nd, docs[nd]))
    if not out:
        raise InputError("no query produced a training triplet")
    return out


def split_folds(query_ids: Sequence[str], n_folds: int = 5, seed: int = 0) -> dict[str, int]:
    ids = sorted(query_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    return {ids[j]: i % n_folds for i, j in enumerate(order.tolist())}


def fold_roles(assignment: Mapping[str, int], test_fold: int, n_folds: int = 5) -> tuple[list, list, list]:
    """(train, validation, test) query ids: test = fold f, validation = f+1 mod n."""
    val_fold = (test_fold + 1) % n_folds
    train = sorted(q for q, f in assignment.items() if f not in (test_fold, val_fold))
    val = sorted(q for q, f in assignment.items() if f == val_fold)
    test = sorted(q for q, f in assignment.items() if f == test_fold)
    return train, val, test
