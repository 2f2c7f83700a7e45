"""A prepared re-ranking task: folds, triplets, BM25 candidates and token caches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import Vocabulary, tokenize
from .metrics import RunEntry, precision_at_k, scores_to_run
from .model import RankingModel
from .retrieval import BM25Index, Document, Qrels, Triplet, fold_roles, sample_triplets, split_folds
from .errors import InputError


@dataclass
class RankingTask:
    vocab: Vocabulary
    docs: dict[str, str]
    queries: dict[str, str]
    qrels: Qrels
    train_queries: list[str]
    val_queries: list[str]
    test_queries: list[str]
    triplets: list[Triplet]
    candidates: dict[str, list[str]]
    max_tokens: int = 62
    _tok: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, corpus: Sequence[Document], queries: Mapping[str, str], qrels: Qrels, *,
              test_fold: int = 0, fold_seed: int = 0, sample_seed: int = 0, top_k: int = 100,
              per_query: int = 10, vocab: Vocabulary | None = None, vocab_size: int | None = None,
              max_len: int = 64, index: BM25Index | None = None) -> "RankingTask":
        docs = {d.doc_id: d.text for d in corpus}
        index = index or BM25Index.build(corpus)
        folds = split_folds(list(queries), 5, fold_seed)
        train_q, val_q, test_q = fold_roles(folds, test_fold)
        if not train_q or not val_q:
            raise InputError("need non-empty train and validation folds")
        triplets = sample_triplets(index, qrels, {q: queries[q] for q in train_q}, docs, top_k, per_query, sample_seed)
        if vocab is None:
            vocab = Vocabulary.build([d.text for d in corpus] + list(queries.values()), vocab_size)
        candidates = {q: [d for d, _ in index.topk(queries[q], top_k)] for q in val_q + test_q}
        return cls(vocab, docs, dict(queries), qrels, train_q, val_q, test_q, triplets, candidates, max_len - 2)

    def query_tokens(self, qid_or_text: str, is_text: bool = False) -> list[int]:
        text = qid_or_text if is_text else self.queries[qid_or_text]
        key = ("q", text)
        if key not in self._tok:
            self._tok[key] = tokenize(text, self.vocab, self.max_tokens)
        return self._tok[key]

    def doc_tokens(self, doc_id: str) -> list[int]:
        key = ("d", doc_id)
        if key not in self._tok:
            self._tok[key] = tokenize(self.docs[doc_id], self.vocab, self.max_tokens)
        return self._tok[key]

    def text_tokens(self, text: str) -> list[int]:
        key = ("t", text)
        if key not in self._tok:
            self._tok[key] = tokenize(text, self.vocab, self.max_tokens)
        return self._tok[key]

    def qrels_for(self, qids: Sequence[str]) -> Qrels:
        return Qrels({q: self.qrels[q] for q in qids})

    def score(self, model: RankingModel, qids: Sequence[str]) -> dict[str, dict[str, float]]:
        """Re-rank each query's BM25 candidates with ``model``."""
        return {q: dict(zip(self.candidates[q], model.score_pairs(self.query_tokens(q),
                                                                  [self.doc_tokens(d) for d in self.candidates[q]]).tolist()))
                for q in qids}

    def run(self, model: RankingModel, qids: Sequence[str], tag: str = "rankforge") -> list[RunEntry]:
        return scores_to_run(self.score(model, qids), tag)

    def precision(self, model: RankingModel, qids: Sequence[str], k: int) -> float:
        return precision_at_k(self.run(model, qids), self.qrels_for(qids), k)

    def bm25_run(self, qids: Sequence[str]) -> list[RunEntry]:
        scores = {q: {d: float(len(self.candidates[q]) - i) for i, d in enumerate(self.candidates[q])} for q in qids}
        return scores_to_run(scores, "bm25")
