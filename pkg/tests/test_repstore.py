import numpy as np
import pytest

from rankforge import synth
from rankforge.encoder import EncoderConfig, Vocabulary, encode_bi, forward_counts, tokenize
from rankforge.errors import ConfigError, InputError, StalenessError
from rankforge.model import ModelConfig, RankingModel
from rankforge.repstore import (DocRepStore, MissingDocumentError, fingerprint, fresh_scores, precompute, rerank,
                                rerank_scores, timing_report)
from rankforge.retrieval import Document


@pytest.fixture(scope="module")
def data():
    c = synth.interaction(20, 200, seed=0)
    vocab = Vocabulary.build([d.text for d in c.corpus] + list(c.queries.values()))
    return c, vocab


def model(vocab, kind="trmd", mode="bi", bi="colbert", seed=0):
    return RankingModel(ModelConfig(kind=kind, encoder=EncoderConfig(vocab_size=vocab.size), encoder_mode=mode,
                                    bi_ranker=bi), seed=seed)


def test_small_store_and_stable_fingerprint(data):
    c, vocab = data
    m = model(vocab)
    docs = c.corpus[:2]
    a, b = precompute(m, docs, vocab), precompute(m, docs, vocab)
    assert len(a) == 2 and a.fingerprint == b.fingerprint == fingerprint(m)
    assert a.dumps() == b.dumps()
    assert a.dumps()[:4] == b"DREP"


def test_entry_equals_fresh_encoding(data):
    c, vocab = data
    m = model(vocab)
    store = precompute(m, c.corpus[:5], vocab)
    for doc in c.corpus[:5]:
        fresh = encode_bi(tokenize(doc.text, vocab, 62), m.encoder, "document")
        entry = store.get(doc.doc_id)
        assert np.array_equal(entry.cls, fresh.cls.data[0])
        assert np.array_equal(entry.tokens, fresh.tokens.data[0])


@pytest.mark.parametrize("kind,bi", [("trmd", "twin"), ("trmd", "colbert"), ("twin_bi", "twin"),
                                     ("colbert_bi", "colbert")])
def test_store_scores_bit_equal_fresh(data, kind, bi):
    c, vocab = data
    m = model(vocab, kind=kind, bi=bi, seed=3)
    texts = {d.doc_id: d.text for d in c.corpus}
    cands = [d.doc_id for d in c.corpus[:15]]
    store = precompute(m, [d for d in c.corpus if d.doc_id in cands], vocab)
    for qtext in list(c.queries.values())[:3]:
        stored = rerank_scores(m, store, qtext, cands, vocab)
        fresh = fresh_scores(m, qtext, texts, cands, vocab)
        assert stored == fresh


def test_round_trip_preserves_bits(data, tmp_path):
    c, vocab = data
    store = precompute(model(vocab), c.corpus[:10], vocab)
    store.save(tmp_path / "s.drep")
    back = DocRepStore.load(tmp_path / "s.drep")
    assert back.fingerprint == store.fingerprint and list(back.docs) == list(store.docs)
    for d in store.docs:
        assert back.get(d).cls.tobytes() == store.get(d).cls.tobytes()
        assert back.get(d).tokens.tobytes() == store.get(d).tokens.tobytes()
    with pytest.raises(InputError):
        DocRepStore.loads(b"XXXX" + store.dumps()[4:])
    with pytest.raises(InputError):
        DocRepStore.loads(store.dumps()[:-8])


def test_f4_store_within_tolerance(data):
    c, vocab = data
    m = model(vocab)
    cands = [d.doc_id for d in c.corpus[:10]]
    store = DocRepStore.loads(precompute(m, c.corpus[:10], vocab, dtype="f4").dumps())
    q = next(iter(c.queries.values()))
    got = rerank_scores(m, store, q, cands, vocab)
    ref = fresh_scores(m, q, {d.doc_id: d.text for d in c.corpus}, cands, vocab)
    assert max(abs(got[d] - ref[d]) for d in cands) < 1e-5


def test_one_changed_byte_is_stale(data):
    c, vocab = data
    m = model(vocab)
    store = precompute(m, c.corpus[:3], vocab)
    p = m.parameters()["maxsim.projection"]
    raw = bytearray(p.data.tobytes())
    raw[0] ^= 1
    p.data = np.frombuffer(bytes(raw), dtype=np.float64).reshape(p.shape).copy()
    with pytest.raises(StalenessError):
        rerank_scores(m, store, "x", [c.corpus[0].doc_id], vocab)


def test_lookup_errors_and_degenerate_candidates(data):
    c, vocab = data
    m = model(vocab)
    store = precompute(m, c.corpus[:3], vocab)
    with pytest.raises(MissingDocumentError, match="nope"):
        rerank(m, store, "q", "x", [c.corpus[0].doc_id, "nope"], vocab)
    assert rerank(m, store, "q", "x", [], vocab) == []
    (entry,) = rerank(m, store, "q", "x", [c.corpus[1].doc_id], vocab, tag="t")
    assert entry.rank == 1 and entry.tag == "t"


def test_cross_model_cannot_precompute(data):
    c, vocab = data
    with pytest.raises(ConfigError, match="query-dependent"):
        precompute(model(vocab, kind="mono_cross", mode="cross"), c.corpus[:2], vocab)


def test_empty_document_is_storable(data):
    _, vocab = data
    m = model(vocab)
    store = precompute(m, [Document("e", ""), Document("f", "x")], vocab)
    assert store.get("e").count == 0
    assert DocRepStore.loads(store.dumps()).get("e").count == 0
    assert set(rerank_scores(m, store, "x", ["f"], vocab)) == {"f"}
    # MaxSim over zero document tokens has no value
    with pytest.raises(InputError, match="unmasked token"):
        rerank_scores(m, store, "x", ["e"], vocab)


def test_query_encoded_once_per_rerank(data):
    c, vocab = data
    m = model(vocab)
    store = precompute(m, c.corpus, vocab)
    ids = [d.doc_id for d in c.corpus]
    for n in (1, 10, 100):
        before = forward_counts["query"]
        rerank_scores(m, store, "e0 a0", ids[:n], vocab)
        assert forward_counts["query"] - before == 1


def test_timing_report(data):
    c, vocab = data
    bi = model(vocab)
    cross = model(vocab, kind="mono_cross", mode="cross")
    store = precompute(bi, c.corpus, vocab)
    texts = {d.doc_id: d.text for d in c.corpus}
    queries = dict(list(c.queries.items())[:3])
    cands = {q: [d.doc_id for d in c.corpus[:100]] for q in queries}
    rep = timing_report(bi, cross, store, queries, cands, texts, vocab)
    assert rep.median_ms["bi+store"] < rep.median_ms["bi-fresh"]
    assert rep.query_forwards["bi+store"] == 3
    assert rep.query_forwards["bi-fresh"] == 300
    assert "bi+store" in rep.table()
    one = timing_report(bi, cross, store, queries, {q: cands[q][:1] for q in queries}, texts, vocab)
    assert one.n_candidates == 1.0
