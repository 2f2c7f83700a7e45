"""P@k and nDCG@k over TREC run files."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import InputError, ParseError, ValidationError
from .retrieval import Qrels


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str = "rankforge"


def make_run(query_id: str, scored: Iterable[tuple[str, float]], tag: str = "rankforge") -> list[RunEntry]:
    """Sort by score descending (ties by ascending doc_id) and assign ranks.

    Scores are first rounded to the 6 decimals the run format keeps, so a
    written run reads back with the same order.
    """
    rounded = [(d, float(f"{s:.6f}")) for d, s in scored]
    ordered = sorted(rounded, key=lambda x: (-x[1], x[0]))
    return [RunEntry(query_id, d, i + 1, float(s), tag) for i, (d, s) in enumerate(ordered)]


def group_run(run: Iterable[RunEntry]) -> dict[str, list[RunEntry]]:
    by_query = defaultdict(list)
    for e in run:
        by_query[e.query_id].append(e)
    for entries in by_query.values():
        entries.sort(key=lambda e: e.rank)
    return dict(by_query)


def validate_run(run: Sequence[RunEntry]) -> None:
    for qid, entries in group_run(run).items():
        for i, e in enumerate(entries):
            if e.rank != i + 1:
                raise ValidationError(f"query {qid}: ranks are not 1..n without gaps")
            if i:
                prev = entries[i - 1]
                if e.score > prev.score or (e.score == prev.score and e.doc_id < prev.doc_id):
                    raise ValidationError(f"query {qid}: rank {e.rank} breaks score order or tie rule")


def _per_query(run: Sequence[RunEntry], qrels: Qrels, k: int, fn) -> float:
    if k < 1:
        raise InputError("k must be >= 1")
    grouped = group_run(run)
    qids = qrels.query_ids()
    if not qids:
        return 0.0
    total = 0.0
    for qid in qids:
        docs = [e.doc_id for e in grouped.get(qid, [])[:k]]
        total += fn(qid, docs)
    return total / len(qids)


def precision_at_k(run: Sequence[RunEntry], qrels: Qrels, k: int) -> float:
    """Mean over judged queries of (#relevant in top k) / k; missing queries score 0."""
    return _per_query(run, qrels, k, lambda q, docs: sum(qrels.get(q, d) > 0 for d in docs) / k)


def dcg(gains: Sequence[int]) -> float:
    return sum((2.0**rel - 1.0) / math.log2(i + 2) for i, rel in enumerate(gains))


def ndcg_at_k(run: Sequence[RunEntry], qrels: Qrels, k: int) -> float:
    def one(qid, docs):
        ideal = dcg(sorted(qrels[qid].values(), reverse=True)[:k])
        if ideal == 0.0:
            return 0.0
        return dcg([qrels.get(qid, d) for d in docs]) / ideal

    return _per_query(run, qrels, k, one)


def evaluate(run: Sequence[RunEntry], qrels: Qrels, metric: str) -> float:
    """Evaluate a metric named like ``p@20`` or ``ndcg@5``."""
    name, _, k = metric.lower().partition("@")
    if not k.isdigit():
        raise InputError(f"metric {metric!r} must look like p@k or ndcg@k")
    if name in ("p", "precision"):
        return precision_at_k(run, qrels, int(k))
    if name == "ndcg":
        return ndcg_at_k(run, qrels, int(k))
    raise InputError(f"unknown metric {metric!r}")


def write_run(run: Sequence[RunEntry], path) -> None:
    validate_run(run)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, entries in group_run(run).items():
            for e in entries:
                fh.write(f"{e.query_id} Q0 {e.doc_id} {e.rank} {e.score:.6f} {e.tag}\n")


def read_run(path) -> list[RunEntry]:
    run = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"expected 6 columns, found {len(parts)}", n)
            try:
                run.append(RunEntry(parts[0], parts[2], int(parts[3]), float(parts[4]), parts[5]))
            except ValueError as exc:
                raise ParseError(str(exc), n) from exc
    validate_run(run)
    return run


def scores_to_run(scores: Mapping[str, Mapping[str, float]], tag: str = "rankforge") -> list[RunEntry]:
    run = []
    for qid in sorted(scores):
        run.extend(make_run(qid, scores[qid].items(), tag))
    return run
