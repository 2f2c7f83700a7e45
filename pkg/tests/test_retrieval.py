import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_bm25
from rankforge.errors import InputError, ParseError
from rankforge.retrieval import (BM25Index, Document, Qrels, bm25_topk, build_index, fold_roles, read_corpus,
                                 read_qrels, read_queries, sample_triplets, split_folds, write_corpus, write_qrels,
                                 write_queries)

WORDS = ["ant", "bee", "cat", "dog", "eel", "fox", "gnu"]


def docs_of(texts):
    return [Document(f"d{i:03d}", t) for i, t in enumerate(texts)]


# -- index ---------------------------------------------------------------------------------------


def test_single_doc_postings():
    idx = build_index([Document("x", "a b a")])
    assert idx.postings == {"a": [(0, 2)], "b": [(0, 1)]}
    assert idx.avgdl == 3.0


def test_empty_document_counts_toward_avgdl():
    idx = build_index([Document("x", ""), Document("y", "a b")])
    assert idx.doc_len.tolist() == [0, 2]
    assert idx.avgdl == 1.0
    assert bm25_topk(idx, "a", 5)[0][0] == "y"


def test_avgdl_accumulator():
    rng = np.random.default_rng(0)
    texts = [" ".join(rng.choice(WORDS, rng.integers(0, 30))) for _ in range(100)]
    idx = build_index(docs_of(texts))
    acc = 0
    for t in texts:
        acc += len(t.split())
    assert abs(idx.avgdl - acc / 100) < 1e-12
    for ps in idx.postings.values():
        assert [p[0] for p in ps] == sorted(p[0] for p in ps)


def test_duplicate_and_empty_corpus():
    with pytest.raises(InputError, match="d1"):
        build_index([Document("d1", "a"), Document("d1", "b")])
    with pytest.raises(InputError):
        build_index([])


# -- scoring -------------------------------------------------------------------------------------


def test_absent_term_gives_empty_list():
    assert bm25_topk(build_index(docs_of(["a b", "c"])), "zebra", 10) == []


def test_single_doc_hand_score():
    ((doc, score),) = bm25_topk(build_index([Document("d", "cat")]), "cat", 10)
    assert doc == "d"
    assert abs(score - 0.28768) < 1e-5
    assert abs(score - math.log(1 + 1 / 3)) < 1e-15


def test_ties_break_by_doc_id():
    idx = build_index([Document("b", "cat dog"), Document("a", "cat eel"), Document("c", "fox")])
    assert [d for d, _ in bm25_topk(idx, "cat", 10)] == ["a", "b"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(st.sampled_from(WORDS), max_size=15), min_size=1, max_size=200),
       st.lists(st.sampled_from(WORDS + ["yak"]), min_size=1, max_size=4))
def test_topk_matches_full_scan(doc_words, query_words):
    texts = [" ".join(w) for w in doc_words]
    query = " ".join(query_words)
    idx = build_index(docs_of(texts))
    ref = naive_bm25(texts, query)
    expected = sorted(((f"d{i:03d}", s) for i, s in enumerate(ref) if s > 0), key=lambda x: (-x[1], x[0]))
    got = bm25_topk(idx, query, len(texts))
    assert len(got) == len(expected)
    for (gd, gs), (_, es) in zip(got, expected):
        assert abs(gs - ref[int(gd[1:])]) < 1e-9
        assert abs(gs - es) < 1e-9
    assert [s for _, s in got] == sorted((s for _, s in got), reverse=True)
    assert len(bm25_topk(idx, query, 3)) <= 3


def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    idx = build_index(docs_of([" ".join(rng.choice(WORDS, 8)) for _ in range(50)]))
    idx.save(tmp_path / "i.bmix")
    back = BM25Index.load(tmp_path / "i.bmix")
    assert (tmp_path / "i.bmix").read_bytes()[:4] == b"BMIX"
    for q in ("ant", "cat dog", "gnu fox eel"):
        assert bm25_topk(back, q, 20) == bm25_topk(idx, q, 20)
    with pytest.raises(InputError):
        BM25Index.loads(b"NOPE" + idx.dumps()[4:])
    with pytest.raises(InputError):
        BM25Index.loads(idx.dumps()[:40])


# -- triplets and folds -----------------------------------------------------------------------------


def test_forced_triplet_choice():
    docs = {"p": "cat dog", "n": "cat eel"}
    idx = build_index([Document(k, v) for k, v in docs.items()])
    trips = sample_triplets(idx, Qrels({"q": {"p": 1}}), {"q": "cat"}, docs, per_query=1)
    assert [(t.pos_doc_id, t.neg_doc_id) for t in trips] == [("p", "n")]
    assert trips[0].query_text == "cat" and trips[0].pos_text == "cat dog"


def test_query_without_positives_is_skipped(caplog):
    docs = {"p": "cat dog", "n": "cat eel"}
    idx = build_index([Document(k, v) for k, v in docs.items()])
    qrels = Qrels({"q": {"p": 1}})
    with caplog.at_level(logging.WARNING):
        trips = sample_triplets(idx, qrels, {"q": "cat", "lost": "cat"}, docs, per_query=2)
    assert {t.query_id for t in trips} == {"q"}
    assert "lost" in caplog.text
    with pytest.raises(InputError):
        sample_triplets(idx, qrels, {"lost": "cat"}, docs)


def test_positive_fallback_outside_pool():
    docs = {"p": "zebra", "n1": "cat", "n2": "cat cat"}
    idx = build_index([Document(k, v) for k, v in docs.items()])
    trips = sample_triplets(idx, Qrels({"q": {"p": 2}}), {"q": "cat"}, docs, per_query=3, seed=4)
    assert {t.pos_doc_id for t in trips} == {"p"}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_triplets_respect_qrels_and_seed(seed):
    rng = np.random.default_rng(seed)
    texts = [" ".join(rng.choice(WORDS, 6)) for _ in range(40)]
    docs = {f"d{i:03d}": t for i, t in enumerate(texts)}
    idx = build_index([Document(k, v) for k, v in docs.items()])
    queries = {f"q{j}": " ".join(rng.choice(WORDS, 2)) for j in range(5)}
    qrels = Qrels({q: {d: int(rng.integers(0, 3)) for d in rng.choice(list(docs), 10)} for q in queries})
    try:
        a = sample_triplets(idx, qrels, queries, docs, top_k=20, per_query=4, seed=seed)
    except InputError:
        return
    assert a == sample_triplets(idx, qrels, queries, docs, top_k=20, per_query=4, seed=seed)
    for t in a:
        assert t.pos_doc_id != t.neg_doc_id
        assert qrels.get(t.query_id, t.pos_doc_id) > 0 and qrels.get(t.query_id, t.neg_doc_id) == 0


def test_folds():
    five = split_folds([f"q{i}" for i in range(5)], seed=3)
    assert sorted(five.values()) == [0, 1, 2, 3, 4]
    qids = [f"q{i}" for i in range(50)]
    folds = split_folds(qids, seed=1)
    assert np.bincount(list(folds.values())).tolist() == [10] * 5
    assert folds == split_folds(list(reversed(qids)), seed=1)
    train, val, test = fold_roles(folds, 4)
    assert {folds[q] for q in val} == {0} and {folds[q] for q in test} == {4}
    assert sorted(train + val + test) == sorted(qids) and len(train) == 30


# -- file formats --------------------------------------------------------------------------------------


def test_file_round_trips(tmp_path):
    docs = [Document("d1", "héllo world"), Document("d2", "")]
    write_corpus(docs, tmp_path / "c.jsonl")
    assert read_corpus(tmp_path / "c.jsonl") == docs
    write_queries({"q1": "a b", "q2": "c"}, tmp_path / "q.tsv")
    assert read_queries(tmp_path / "q.tsv") == {"q1": "a b", "q2": "c"}
    qrels = Qrels({"q1": {"d1": 2, "d2": 0}})
    write_qrels(qrels, tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text() == "q1 0 d1 2\nq1 0 d2 0\n"
    back = read_qrels(tmp_path / "r.txt")
    assert back.get("q1", "d1") == 2 and back.get("q1", "zz") == 0


@pytest.mark.parametrize("name,body,reader", [
    ("c.jsonl", '{"doc_id": "a", "text": "x"}\n{"doc_id": "a", "text": "y"}\n', read_corpus),
    ("c.jsonl", '{"doc_id": "a"}\n', read_corpus),
    ("q.tsv", "q1 no tab\n", read_queries),
    ("r.txt", "q1 0 d1\n", read_qrels),
    ("r.txt", "q1 0 d1 high\n", read_qrels),
])
def test_malformed_inputs(tmp_path, name, body, reader):
    (tmp_path / name).write_text(body)
    with pytest.raises((InputError, ParseError)):
        reader(tmp_path / name)
