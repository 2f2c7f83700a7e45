import pytest

from rankforge import synth
from rankforge.errors import UsageError
from rankforge.metrics import precision_at_k, scores_to_run
from rankforge.retrieval import build_index, write_corpus, write_qrels, write_queries


def bm25_p10(c):
    index = build_index(c.corpus)
    scores = {q: dict(index.topk(text, 100)) for q, text in c.queries.items()}
    return precision_at_k(scores_to_run(scores), c.qrels, 10)


def test_lexical_is_solved_by_bm25():
    c = synth.lexical(50, 500, seed=0)
    assert bm25_p10(c) == 1.0
    # the planted rule: relevant iff the document holds the query's topic word
    for qid, text in c.queries.items():
        topic = text.split()[0]
        for d in c.corpus:
            assert (c.qrels.get(qid, d.doc_id) > 0) == (topic in d.text.split())


def test_interaction_defeats_bm25():
    c = synth.interaction(50, 500, seed=0)
    assert bm25_p10(c) < 0.5
    for qid, text in c.queries.items():
        e, a = text.split()
        for d in c.corpus[:50]:
            words = set(d.text.split())
            assert (c.qrels.get(qid, d.doc_id) > 0) == ((e in words) != (a in words))


@pytest.mark.parametrize("kind", ["lexical", "interaction"])
def test_same_seed_same_files(kind, tmp_path):
    for sub in ("a", "b"):
        c = synth.generate(kind, 20, 200, seed=3)
        (tmp_path / sub).mkdir()
        write_corpus(c.corpus, tmp_path / sub / "c")
        write_queries(c.queries, tmp_path / sub / "q")
        write_qrels(c.qrels, tmp_path / sub / "r")
    for name in "cqr":
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    other = synth.generate(kind, 20, 200, seed=4)
    assert [d.text for d in other.corpus] != [d.text for d in c.corpus]


def test_minimum_sizes():
    with pytest.raises(UsageError):
        synth.lexical(19, 500)
    with pytest.raises(UsageError):
        synth.interaction(50, 199)
    with pytest.raises(UsageError):
        synth.generate("noise", 50, 500)
