import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tarscreen.baselines import batch_sizes, next_batch_size, run_autotar
from tarscreen.feedback import FeedbackError, OracleReviewer
from tarscreen.ranking import RankedList


def _topic(n=80, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"d{i:03d}" for i in range(n)]
    V = rng.normal(size=(n, 4))
    rel = {ids[i] for i in range(0, n, 9)}
    for i in range(0, n, 9):
        V[i, 0] += 2
    return RankedList.from_order("T", ids), V, rel, np.array([2.0, 0, 0, 0])


def test_b_sequence():
    seq = [1]
    while len(seq) < 17:
        seq.append(next_batch_size(seq[-1]))
    assert seq == [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 21, 24]


@given(st.integers(1, 5000))
def test_batch_sizes_sum(budget):
    sizes = batch_sizes(budget)
    assert sum(sizes) == budget
    assert all(s > 0 for s in sizes)


def test_full_budget_judges_everything_once():
    cands, V, rel, seed_vec = _topic()
    rev = OracleReviewer(rel)
    res = run_autotar(cands, seed_vec, V, rev)
    seq = res.judged_sequence
    assert len(seq) == len(set(seq)) == 80
    assert rev.calls == seq
    assert res.ranking.doc_ids == seq


def test_budget_exact_and_nominal_batch():
    cands, V, rel, seed_vec = _topic()
    res = run_autotar(cands, seed_vec, V, OracleReviewer(rel), budget=30)
    assert len(res.trace) == 30
    assert sorted(res.ranking.doc_ids) == sorted(cands.doc_ids)
    sizes = [r.batch_size for r in res.trace]
    assert sizes[:3] == [1, 2, 2]
    assert [r.label for r in res.trace] == [int(r.doc_id in rel) for r in res.trace]


def test_deterministic():
    cands, V, rel, seed_vec = _topic(seed=3)
    a = run_autotar(cands, seed_vec, V, OracleReviewer(rel), budget=40, seed=7)
    b = run_autotar(cands, seed_vec, V, OracleReviewer(rel), budget=40, seed=7)
    assert a.trace == b.trace


def test_seed_document_not_emitted():
    cands, V, rel, seed_vec = _topic()
    res = run_autotar(cands, seed_vec, V, OracleReviewer(rel), budget=20)
    assert len(res.ranking) == len(cands)
    assert set(res.ranking.doc_ids) == set(cands.doc_ids)


def test_errors():
    _, V, rel, seed_vec = _topic()
    with pytest.raises(FeedbackError):
        run_autotar(RankedList("T"), seed_vec, V, OracleReviewer(rel))
    cands, V, rel, seed_vec = _topic(n=10)
    with pytest.raises(FeedbackError):
        run_autotar(cands, seed_vec, V, OracleReviewer(rel), budget=11)
