import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tarscreen.corpus import (
    ABSTRACT,
    TITLE,
    TITLE_ABSTRACT,
    CorpusError,
    Dictionary,
    Document,
    InvertedIndex,
    build_dictionary,
    build_index,
    read_corpus,
    tokenize,
    write_corpus,
)


def _index(docs, **kw):
    return build_index(docs, build_dictionary(docs, **{"max_doc_freq_ratio": 1.0, "min_count": 1, **kw}))


class TestTokenize:
    def test_examples(self):
        assert tokenize("") == []
        assert tokenize("Anti-TNF agents, 2nd trial") == ["anti", "tnf", "agents", "2nd", "trial"]
        assert tokenize("BM25 BM25") == ["bm25", "bm25"]

    def test_underscore_separates(self):
        assert tokenize("a_b") == ["a", "b"]

    @given(st.text())
    def test_idempotent(self, text):
        toks = tokenize(text)
        assert tokenize(" ".join(toks)) == toks


class TestDictionary:
    def test_frequent_term_dropped(self):
        docs = [Document(f"d{i}", "the cat" if i < 9 else "dog", "") for i in range(10)]
        d = build_dictionary(docs, max_doc_freq_ratio=0.5, min_count=1)
        assert "the" not in d.terms
        assert "dog" in d.terms

    def test_min_count(self):
        docs = [Document(f"d{i}", "rare" if i < 9 else "x", "") for i in range(30)]
        assert "rare" not in build_dictionary(docs, max_doc_freq_ratio=1.0, min_count=10).terms
        assert "rare" in build_dictionary(docs, max_doc_freq_ratio=1.0, min_count=9).terms

    def test_truncation_keeps_most_frequent(self):
        text = "a a a a a b b b b c c c d d e"
        docs = [Document("d1", text, "")]
        d = build_dictionary(docs, max_terms=3, max_doc_freq_ratio=1.0, min_count=1)
        assert d.terms == {"a", "b", "c"}

    def test_ties_lexicographic(self):
        docs = [Document("d1", "zeta alpha mid", "")]
        d = build_dictionary(docs, max_terms=2, max_doc_freq_ratio=1.0, min_count=1)
        assert d.terms == {"alpha", "mid"}

    def test_empty_corpus(self):
        with pytest.raises(CorpusError, match="no statistics"):
            build_dictionary([])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=8), min_size=1, max_size=15),
           st.randoms(use_true_random=False))
    def test_order_independent(self, texts, rnd):
        docs = [Document(f"d{i}", " ".join(t), "") for i, t in enumerate(texts)]
        shuffled = list(docs)
        rnd.shuffle(shuffled)
        kw = {"max_doc_freq_ratio": 0.6, "min_count": 2, "max_terms": 5}
        assert build_dictionary(docs, **kw).terms == build_dictionary(shuffled, **kw).terms

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), max_size=8), min_size=1, max_size=15),
           st.floats(0.1, 1.0), st.integers(1, 4), st.integers(1, 8))
    def test_invariants(self, texts, ratio, min_count, max_terms):
        docs = [Document(f"d{i}", "t " + " ".join(t), "") for i, t in enumerate(texts)]
        d = build_dictionary(docs, max_terms=max_terms, max_doc_freq_ratio=ratio, min_count=min_count)
        assert len(d.terms) <= max_terms
        for term in d.terms:
            tokens = [tokenize(doc.title) for doc in docs]
            assert sum(t.count(term) for t in tokens) >= min_count
            assert sum(term in t for t in tokens) / len(docs) <= ratio


class TestIndex:
    def test_single_doc_postings(self):
        docs = [Document("d1", "cat", "cat dog")]
        idx = build_index(docs, Dictionary(frozenset({"cat", "dog"}), 10, 1.0, 1))
        assert idx.postings("cat") == [("d1", 1, 1)]
        assert idx.postings("dog") == [("d1", 0, 1)]
        assert idx.doc_lengths["d1"] == {TITLE: 1, ABSTRACT: 2, TITLE_ABSTRACT: 3}

    def test_out_of_dictionary_absent(self):
        docs = [Document("d1", "cat", "cat dog")]
        idx = build_index(docs, Dictionary(frozenset({"cat"}), 10, 1.0, 1))
        assert idx.postings("dog") == []

    def test_duplicate_id(self):
        docs = [Document("d1", "a", ""), Document("d1", "b", "")]
        with pytest.raises(CorpusError, match="d1"):
            build_index(docs, Dictionary(frozenset({"a"}), 10, 1.0, 1))

    def test_document_invariants(self):
        with pytest.raises(CorpusError):
            Document("", "t", "")
        with pytest.raises(CorpusError):
            Document("x", "   ", "abstract")

    def test_lengths_recount(self):
        rng = np.random.default_rng(0)
        vocab = [f"w{i}" for i in range(50)]
        docs = [Document(f"d{i}", " ".join(rng.choice(vocab, 4)), " ".join(rng.choice(vocab, int(rng.integers(0, 20)))))
                for i in range(1000)]
        idx = _index(docs, min_count=3)
        assert idx.N == 1000
        total = sum(v[TITLE_ABSTRACT] for v in idx.doc_lengths.values())
        assert total == sum(len(tokenize(d.title)) + len(tokenize(d.abstract)) for d in docs)

    def test_idempotent(self):
        docs = [Document("a", "x y", "z"), Document("b", "y", "y z")]
        d = build_dictionary(docs, max_doc_freq_ratio=1.0, min_count=1)
        assert build_index(docs, d).to_bytes() == build_index(docs, d).to_bytes()

    def test_unknown_doc(self):
        idx = _index([Document("a", "x", "")])
        with pytest.raises(CorpusError, match="zzz"):
            idx.bm25(["x"], "zzz")

    def test_save_load(self, tmp_path):
        docs = [Document("a", "x y", "z"), Document("b", "y", "y z")]
        idx = _index(docs)
        idx.save(tmp_path / "i.bin")
        back = InvertedIndex.load(tmp_path / "i.bin")
        assert back.doc_ids == idx.doc_ids
        assert back.bm25(["y", "z"], "b") == idx.bm25(["y", "z"], "b")
        assert back.document("b") == docs[1]

    def test_corrupt_blob(self):
        with pytest.raises(CorpusError):
            InvertedIndex.from_bytes(b"not an index")

    def test_corpus_roundtrip(self, tmp_path):
        docs = [Document("a", "Title é", ""), Document("b", "x", "abstract")]
        write_corpus(docs, tmp_path / "c.jsonl")
        assert read_corpus(tmp_path / "c.jsonl") == docs


class TestBm25:
    def test_hand_value(self):
        docs = [Document("d1", "apple banana", "cherry"), Document("d2", "banana cherry", "date"),
                Document("d3", "cherry date", "egg")]
        idx = _index(docs)
        assert idx.bm25(["apple"], "d1") == pytest.approx(math.log((3 - 1 + 0.5) / 1.5 + 1), abs=1e-9)
        assert idx.bm25(["apple"], "d1") == pytest.approx(0.9808, abs=1e-4)

    def test_no_match_zero(self):
        idx = _index([Document("d1", "a b", ""), Document("d2", "c", "")])
        assert idx.bm25(["c"], "d1") == 0.0
        assert idx.bm25(["unseen"], "d1") == 0.0
        assert idx.bm25([], "d1") == 0.0

    def test_tf_monotone(self):
        docs = [Document("d1", "a b", ""), Document("d2", "a a", ""), Document("d3", "c c", "")]
        idx = _index(docs)
        assert idx.bm25(["a"], "d2") > idx.bm25(["a"], "d1")

    def test_idf_values(self):
        docs = [Document("d1", "x y", ""), Document("d2", "y", ""), Document("d3", "y z", "")]
        idx = _index(docs)
        assert idx.idf("x") == pytest.approx(math.log(2.5 / 1.5 + 1))
        assert idx.idf("y") == pytest.approx(math.log(0.5 / 3.5 + 1))
        assert idx.idf("y") > 0
        assert idx.idf("never") == pytest.approx(math.log(8))

    def test_bulk_matches_single(self):
        rng = np.random.default_rng(1)
        vocab = [f"w{i}" for i in range(30)]
        docs = [Document(f"d{i}", " ".join(rng.choice(vocab, 3)), " ".join(rng.choice(vocab, int(rng.integers(0, 10)))))
                for i in range(80)]
        idx = _index(docs)
        q = ["w1", "w2", "w2", "w29"]
        for fld in (TITLE, ABSTRACT, TITLE_ABSTRACT):
            bulk = idx.bm25_all(q, fld)
            single = [idx.bm25(q, d, fld) for d in idx.doc_ids]
            np.testing.assert_allclose(bulk, single, rtol=1e-12, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdef"), min_size=1, max_size=6), min_size=1, max_size=10),
           st.lists(st.sampled_from("abcdefgz"), max_size=5))
    def test_nonnegative_and_zero_iff_no_match(self, texts, query):
        docs = [Document(f"d{i}", " ".join(t), "") for i, t in enumerate(texts)]
        idx = _index(docs)
        for doc in docs:
            s = idx.bm25(query, doc.doc_id, TITLE)
            assert s >= 0
            assert (s == 0) == (not set(query) & set(tokenize(doc.title)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 40), st.floats(1, 40), st.integers(1, 50))
    def test_term_formula(self, tf, dl, avgdl, n):
        from tarscreen.corpus import bm25_term

        df = max(1, n // 3)
        assert bm25_term(tf, dl, avgdl, df, n, 1.2, 0.75) == pytest.approx(oracles.bm25(tf, dl, avgdl, df, n), rel=1e-12)
