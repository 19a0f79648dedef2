"""AUTO-TAR style continuous active learning with geometrically growing batches."""

from __future__ import annotations

import logging
from collections.abc import Mapping

import numpy as np

from .dataio import EmbeddingTable, ReviewProtocol
from .features import sentence_embed
from .feedback import DEFAULT_C, FeedbackError, Reviewer, SimulationResult, TraceRow, train_linear_svm
from .ranking import RankedList

logger = logging.getLogger(__name__)

DEFAULT_NEGATIVES = 100
DEFAULT_SEED = 42


def next_batch_size(b: int) -> int:
    """``B + ceil(B / 10)``."""
    return b + -(-b // 10)


def batch_sizes(budget: int) -> list[int]:
    """Batch sizes consumed until ``budget`` judgments, the last one clamped."""
    out, b, used = [], 1, 0
    while used < budget:
        take = min(b, budget - used)
        out.append(take)
        used += take
        b = next_batch_size(b)
    return out


def protocol_seed_vector(protocol: ReviewProtocol, sent_embeddings: EmbeddingTable) -> np.ndarray:
    """Vector of the pseudo-document built from Title and Objectives."""
    return sentence_embed(f"{protocol.title} {protocol.objectives}", sent_embeddings)


class AutoTarState:
    def __init__(self, n: int, seed: int):
        self.batch_size = 1
        self.judged: list[tuple[int, int]] = []
        self.unjudged = np.ones(n, dtype=bool)
        self.rng = np.random.default_rng(seed)
        self.round = 0


def run_autotar(
    candidates: RankedList,
    seed_vector: np.ndarray,
    doc_vectors: np.ndarray | Mapping[str, np.ndarray],
    reviewer: Reviewer,
    budget: int | None = None,
    seed: int = DEFAULT_SEED,
    n_negatives: int = DEFAULT_NEGATIVES,
    C: float = DEFAULT_C,
) -> SimulationResult:
    """Simulate the baseline until ``budget`` documents are judged.

    Each round trains on the real judgments, the relevant pseudo-document and
    ``n_negatives`` unjudged documents presumed irrelevant, then judges the
    top ``B`` unjudged candidates.
    """
    ids = candidates.doc_ids
    n = len(ids)
    if n == 0:
        raise FeedbackError(f"topic {candidates.topic_id}: empty candidate list")
    budget = n if budget is None else budget
    if not 1 <= budget <= n:
        raise FeedbackError(f"budget must lie in [1, {n}], got {budget}")
    if isinstance(doc_vectors, Mapping):
        V = np.vstack([np.asarray(doc_vectors[d], dtype=np.float64) for d in ids])
    else:
        V = np.asarray(doc_vectors, dtype=np.float64)
    # order ties by doc id
    name_rank = np.argsort(np.argsort(np.array(ids, dtype=object), kind="stable"), kind="stable")
    seed_vector = np.asarray(seed_vector, dtype=np.float64).reshape(1, -1)

    st = AutoTarState(n, seed)
    trace: list[TraceRow] = []
    last_scores = np.zeros(n)
    while len(st.judged) < budget:
        st.round += 1
        pool = np.flatnonzero(st.unjudged)
        neg = st.rng.choice(pool, size=min(n_negatives, len(pool)), replace=False) if len(pool) else pool
        rows = [i for i, _ in st.judged]
        X = np.vstack([V[rows], seed_vector, V[neg]]) if rows else np.vstack([seed_vector, V[neg]])
        y = np.array([lab for _, lab in st.judged] + [1] + [0] * len(neg))
        if len(np.unique(y)) < 2:
            # no negative available: fall back to the current order
            scores = -np.arange(n, dtype=np.float64)
        else:
            clf = train_linear_svm(X, y, C=C, seed=seed, warm_start=None)
            scores = clf.decision_function(V)
        last_scores = scores
        order = pool[np.lexsort((name_rank[pool], -scores[pool]))]
        take = min(st.batch_size, budget - len(st.judged))
        for i in order[:take]:
            lab = 1 if int(reviewer.judge(ids[i])) > 0 else 0
            st.judged.append((int(i), lab))
            st.unjudged[i] = False
            trace.append(TraceRow(len(st.judged), ids[i], lab, len(st.judged), st.round, st.batch_size))
        st.batch_size = next_batch_size(st.batch_size)
    rest = np.flatnonzero(st.unjudged)
    rest = rest[np.lexsort((name_rank[rest], -last_scores[rest]))]
    order_ids = [ids[i] for i, _ in st.judged] + [ids[i] for i in rest]
    return SimulationResult(RankedList.from_order(candidates.topic_id, order_ids), trace, st)
