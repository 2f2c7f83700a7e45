"""Offline document representations for bi-encoder models, and re-ranking against them.

Store layout (little-endian)::

    b"DREP" | u32 version | u64 fingerprint | u8 bytes-per-float | u32 hidden | u32 n_docs
    n_docs x (u16 len + doc_id | u64 offset | u32 token count)
    per doc, at its offset: cls [h] then tokens [count x h]
"""

from __future__ import annotations

import json
import statistics
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint
from .encoder import TextReps, Vocabulary, encode_bi, forward_counts, tokenize
from .errors import ConfigError, InputError, StalenessError
from .metrics import RunEntry, make_run
from .model import RankingModel
from .retrieval import Document
from .tensor import Tensor

MAGIC = b"DREP"
VERSION = 1


class MissingDocumentError(InputError, KeyError):
    def __init__(self, doc_id: str):
        super().__init__(f"document {doc_id!r} is not in the representation store")
        self.doc_id = doc_id

    def __str__(self) -> str:
        return self.args[0]


def fingerprint(model: RankingModel) -> int:
    """64-bit FNV-1a over the checkpoint bytes, the serialized config and the live fp64 parameters.

    The checkpoint payload is fp32, so the fp64 bytes are what catch a change
    below fp32 resolution in a model that was never saved.
    """
    cfg = json.dumps(model.config.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    live = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in model.parameters().values())
    return checkpoint.fnv1a64(checkpoint.dumps(model) + cfg + live)


@dataclass
class StoredDoc:
    cls: np.ndarray
    tokens: np.ndarray

    @property
    def count(self) -> int:
        return self.tokens.shape[0]

    def reps(self) -> TextReps:
        return TextReps(Tensor(self.cls[None, :]), Tensor(self.tokens[None, :, :]),
                        np.ones((1, self.count), dtype=bool))


class DocRepStore:
    def __init__(self, fingerprint: int, hidden: int, docs: dict[str, StoredDoc], dtype: str = "f8"):
        if dtype not in ("f8", "f4"):
            raise ConfigError(f"store dtype must be f8 or f4, got {dtype!r}")
        self.fingerprint = fingerprint
        self.hidden = hidden
        self.docs = docs
        self.dtype = dtype

    def __len__(self) -> int:
        return len(self.docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.docs

    def get(self, doc_id: str) -> StoredDoc:
        try:
            return self.docs[doc_id]
        except KeyError:
            raise MissingDocumentError(doc_id) from None

    def check(self, model: RankingModel) -> None:
        fp = fingerprint(model)
        if fp != self.fingerprint:
            raise StalenessError(f"store was built for model {self.fingerprint:016x}, "
                                 f"scoring model is {fp:016x}; rerun precompute")

    def dumps(self) -> bytes:
        width = 8 if self.dtype == "f8" else 4
        ids = list(self.docs)
        table_size = sum(2 + len(d.encode("utf-8")) + 12 for d in ids)
        offset = 4 + 4 + 8 + 1 + 4 + 4 + table_size
        head = [MAGIC, struct.pack("<IQBII", VERSION, self.fingerprint, width, self.hidden, len(ids))]
        body = []
        for doc_id in ids:
            entry = self.docs[doc_id]
            raw = doc_id.encode("utf-8")
            head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<QI", offset, entry.count))
            chunk = np.concatenate([entry.cls[None, :], entry.tokens]).astype(f"<{self.dtype}").tobytes()
            body.append(chunk)
            offset += len(chunk)
        return b"".join(head + body)

    @classmethod
    def loads(cls, blob: bytes) -> "DocRepStore":
        if blob[:4] != MAGIC:
            raise InputError("not a representation store (bad magic)")
        try:
            version, fp, width, h, n = struct.unpack_from("<IQBII", blob, 4)
            if version != VERSION:
                raise InputError(f"unsupported store version {version}")
            if width not in (4, 8):
                raise InputError(f"bad float width {width}")
            dtype = f"<f{width}"
            pos = 25
            docs = {}
            for _ in range(n):
                (ln,) = struct.unpack_from("<H", blob, pos)
                doc_id = blob[pos + 2 : pos + 2 + ln].decode("utf-8")
                off, count = struct.unpack_from("<QI", blob, pos + 2 + ln)
                pos += 2 + ln + 12
                if off + (count + 1) * h * width > len(blob):
                    raise InputError(f"store entry {doc_id!r} runs past the end of the file")
                arr = np.frombuffer(blob, dtype=dtype, count=(count + 1) * h, offset=off).astype(np.float64)
                arr = arr.reshape(count + 1, h)
                docs[doc_id] = StoredDoc(arr[0].copy(), arr[1:].copy())
        except struct.error as exc:
            raise InputError(f"truncated store file: {exc}") from exc
        return cls(fp, h, docs, "f8" if width == 8 else "f4")

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps())

    @classmethod
    def load(cls, path) -> "DocRepStore":
        try:
            return cls.loads(Path(path).read_bytes())
        except OSError as exc:
            raise InputError(f"cannot read store {path}: {exc}") from exc


def precompute(model: RankingModel, corpus: Iterable[Document], vocab: Vocabulary, dtype: str = "f8") -> DocRepStore:
    """Encode every document once with the model's bi encoder."""
    if model.config.encoder_mode != "bi":
        raise ConfigError("cross-encoder representations are query-dependent and cannot be precomputed")
    max_tokens = model.config.encoder.max_len - 2
    docs = {}
    for doc in corpus:
        if doc.doc_id in docs:
            raise InputError(f"duplicate doc_id {doc.doc_id!r}")
        reps = model.encode_doc(tokenize(doc.text, vocab, max_tokens))
        docs[doc.doc_id] = StoredDoc(reps.cls.data[0].copy(), reps.tokens.data[0].copy())
    return DocRepStore(fingerprint(model), model.config.encoder.hidden, docs, dtype)


def rerank_scores(model: RankingModel, store: DocRepStore, query_text: str, candidates: Sequence[str],
                  vocab: Vocabulary) -> dict[str, float]:
    """Raw fp64 scores of the candidates; the query is encoded exactly once."""
    store.check(model)
    if not candidates:
        return {}
    entries = [(d, store.get(d)) for d in candidates]
    query = model.encode_query(tokenize(query_text, vocab, model.config.encoder.max_len - 2))
    return {d: model.score_encoded(query, e.reps())[0] for d, e in entries}


def rerank(model: RankingModel, store: DocRepStore, query_id: str, query_text: str, candidates: Sequence[str],
           vocab: Vocabulary, tag: str = "rankforge") -> list[RunEntry]:
    scores = rerank_scores(model, store, query_text, candidates, vocab)
    return make_run(query_id, scores.items(), tag)


def fresh_scores(model: RankingModel, query_text: str, docs: Mapping[str, str], candidates: Sequence[str],
                 vocab: Vocabulary) -> dict[str, float]:
    """Reference path: every candidate re-encoded from its text."""
    max_tokens = model.config.encoder.max_len - 2
    q = tokenize(query_text, vocab, max_tokens)
    return {d: model.score_fresh(q, tokenize(docs[d], vocab, max_tokens)) for d in candidates}


@dataclass
class TimingReport:
    median_ms: dict[str, float]
    query_forwards: dict[str, int]
    n_queries: int
    n_candidates: float

    def table(self) -> str:
        lines = [f"{'path':<12}{'median ms/query':>18}{'query encodes':>16}"]
        for name, ms in self.median_ms.items():
            lines.append(f"{name:<12}{ms:>18.3f}{self.query_forwards[name]:>16d}")
        lines.append(f"queries={self.n_queries} mean candidates={self.n_candidates:.1f}")
        return "\n".join(lines)


def timing_report(bi_model: RankingModel, cross_model: RankingModel, store: DocRepStore,
                  queries: Mapping[str, str], candidates: Mapping[str, Sequence[str]], docs: Mapping[str, str],
                  vocab: Vocabulary) -> TimingReport:
    """Median per-query scoring latency for stored bi, fresh bi and cross scoring."""
    max_tokens = cross_model.config.encoder.max_len - 2
    paths = {
        "bi+store": lambda q, c: rerank_scores(bi_model, store, queries[q], c, vocab),
        "bi-fresh": lambda q, c: fresh_scores(bi_model, queries[q], docs, c, vocab),
        "cross": lambda q, c: cross_model.score_pairs(tokenize(queries[q], vocab, max_tokens),
                                                      [tokenize(docs[d], vocab, max_tokens) for d in c]),
    }
    times: dict[str, list[float]] = {k: [] for k in paths}
    forwards: dict[str, int] = {}
    for name, fn in paths.items():
        before = forward_counts["query"]
        for qid in queries:
            start = time.perf_counter()
            fn(qid, list(candidates.get(qid, [])))
            times[name].append((time.perf_counter() - start) * 1000.0)
        forwards[name] = forward_counts["query"] - before
    sizes = [len(candidates.get(q, [])) for q in queries]
    return TimingReport({k: statistics.median(v) if v else 0.0 for k, v in times.items()}, forwards,
                        len(queries), float(np.mean(sizes)) if sizes else 0.0)
