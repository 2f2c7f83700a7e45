import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_mean, brute_ndcg, brute_precision, random_instance
from rankforge.errors import InputError, ParseError, ValidationError
from rankforge.metrics import (RunEntry, evaluate, make_run, ndcg_at_k, precision_at_k, read_run, scores_to_run,
                               write_run)
from rankforge.retrieval import Qrels


def ranked(qid, docs):
    """Run entries in the given order with strictly decreasing scores."""
    return make_run(qid, [(d, float(len(docs) - i)) for i, d in enumerate(docs)])


def to_run(rankings):
    out = []
    for q in sorted(rankings):
        out += ranked(q, rankings[q])
    return out


def test_precision_examples():
    docs = [f"d{i}" for i in range(20)]
    assert precision_at_k(ranked("q", docs), Qrels({"q": {d: 1 for d in docs}}), 20) == 1.0
    assert precision_at_k(ranked("q", docs), Qrels({"q": {"x": 1}}), 20) == 0.0
    qrels = Qrels({"q": {d: 1 for d in docs[::3]}})
    assert precision_at_k(ranked("q", docs), qrels, 20) == 0.35
    # fixed denominator when fewer than k were retrieved
    assert precision_at_k(ranked("q", docs[:2]), Qrels({"q": {"d0": 1, "d1": 1}}), 10) == 0.2


def test_ndcg_examples():
    qrels = Qrels({"q": {"a": 0, "b": 1, "c": 2}})
    assert abs(ndcg_at_k(ranked("q", ["a", "b", "c"]), qrels, 3) - 0.5869) < 1e-4
    assert ndcg_at_k(ranked("q", ["c", "b", "a"]), qrels, 3) == 1.0
    assert ndcg_at_k(ranked("q", ["a", "b"]), Qrels({"q": {"a": 0}}), 3) == 0.0


def test_missing_query_counts_as_zero():
    qrels = Qrels({"q1": {"a": 1}, "q2": {"b": 1}})
    assert precision_at_k(ranked("q1", ["a"]), qrels, 1) == 0.5
    assert ndcg_at_k(ranked("q1", ["a"]), qrels, 1) == 0.5


def test_bad_k_and_metric_names():
    with pytest.raises(InputError):
        precision_at_k([], Qrels({"q": {}}), 0)
    with pytest.raises(InputError):
        evaluate([], Qrels(), "map@10")
    with pytest.raises(InputError):
        evaluate([], Qrels(), "p@x")
    qrels = Qrels({"q": {"a": 1}})
    assert evaluate(ranked("q", ["a"]), qrels, "P@1") == 1.0
    assert evaluate(ranked("q", ["a"]), qrels, "ndcg@5") == 1.0


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        rankings, rels = random_instance(rng)
        run, qrels = to_run(rankings), Qrels(rels)
        for k in (1, 5, 20):
            assert abs(precision_at_k(run, qrels, k) - brute_mean(brute_precision, rankings, rels, k)) < 1e-9
            assert abs(ndcg_at_k(run, qrels, k) - brute_mean(brute_ndcg, rankings, rels, k)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25))
def test_bounds_and_relabel_invariance(seed, k):
    rng = np.random.default_rng(seed)
    rankings, rels = random_instance(rng)
    run, qrels = to_run(rankings), Qrels(rels)
    p, n = precision_at_k(run, qrels, k), ndcg_at_k(run, qrels, k)
    assert 0.0 <= p <= 1.0 and 0.0 <= n <= 1.0 + 1e-12
    # relabel ids, keeping relevance and order
    new = {f"d{j}": f"z{int(x)}" for j, x in enumerate(rng.permutation(50))}
    r2 = {q: [new[d] for d in docs] for q, docs in rankings.items()}
    q2 = Qrels({q: {new[d]: g for d, g in judged.items()} for q, judged in rels.items()})
    run2 = []
    for q in sorted(r2):
        run2 += [RunEntry(q, d, i + 1, float(len(r2[q]) - i)) for i, d in enumerate(r2[q])]
    assert precision_at_k(run2, q2, k) == p
    assert ndcg_at_k(run2, q2, k) == n


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_precision_monotone_under_swap(seed, k):
    rng = np.random.default_rng(seed)
    docs = [f"d{j}" for j in range(30)]
    rels = {d: int(rng.integers(0, 2)) for d in docs}
    order = list(rng.permutation(docs))
    top_non = [i for i in range(k) if rels[order[i]] == 0]
    below_rel = [i for i in range(k, 30) if rels[order[i]] > 0]
    if not top_non or not below_rel:
        return
    before = precision_at_k(ranked("q", order), Qrels({"q": rels}), k)
    i, j = top_non[0], below_rel[0]
    order[i], order[j] = order[j], order[i]
    assert precision_at_k(ranked("q", order), Qrels({"q": rels}), k) >= before


# -- run files ----------------------------------------------------------------------------------------


def test_run_round_trip(tmp_path):
    run = scores_to_run({"q2": {"a": 0.5, "b": 1.25}, "q1": {"c": -3.0}}, tag="t")
    write_run(run, tmp_path / "r.run")
    assert (tmp_path / "r.run").read_text().splitlines()[0] == "q1 Q0 c 1 -3.000000 t"
    assert read_run(tmp_path / "r.run") == run


def test_tie_orders_by_doc_id():
    run = make_run("q", [("B", 1.0), ("A", 1.0), ("C", 2.0)])
    assert [(e.doc_id, e.rank) for e in run] == [("C", 1), ("A", 2), ("B", 3)]


def test_five_columns_is_a_parse_error(tmp_path):
    (tmp_path / "r.run").write_text("q Q0 a 1 1.0 t\nq Q0 b 2 0.5\n")
    with pytest.raises(ParseError) as err:
        read_run(tmp_path / "r.run")
    assert err.value.line_no == 2 and "line 2" in str(err.value)


@pytest.mark.parametrize("body", ["q Q0 a 2 1.0 t\n", "q Q0 a 1 1.0 t\nq Q0 b 2 3.0 t\n",
                                  "q Q0 b 1 1.0 t\nq Q0 a 2 1.0 t\n"])
def test_invariant_violations(tmp_path, body):
    (tmp_path / "r.run").write_text(body)
    with pytest.raises(ValidationError):
        read_run(tmp_path / "r.run")
