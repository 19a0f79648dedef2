"""Stage 1: two-query BM25 retrieval from the protocol, fused into one candidate list."""

from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np

from .corpus import DEFAULT_B, DEFAULT_K1, TITLE_ABSTRACT, Dictionary, InvertedIndex, tokenize
from .dataio import ReviewProtocol
from .ranking import RankedList

logger = logging.getLogger(__name__)

DEFAULT_K = 100_000
FUSION_MODES = ("score", "rank")
_NORM_DIGITS = 12


class RetrievalError(RuntimeError):
    pass


def formulate_query(text: str, dictionary: Dictionary) -> list[str]:
    """Dictionary terms of ``text`` in order, duplicates kept."""
    return dictionary.filter(tokenize(text))


def retrieve_topk(
    query_tokens: Sequence[str],
    index: InvertedIndex,
    k: int,
    field: str = TITLE_ABSTRACT,
    topic_id: str = "",
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> RankedList:
    """Top-``k`` documents with a positive BM25 score, ties by doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not query_tokens:
        return RankedList(topic_id)
    scores = index.bm25_all(query_tokens, field, k1, b)
    hits = np.flatnonzero(scores > 0)
    ids = index.doc_ids
    pairs = sorted(((ids[i], float(scores[i])) for i in hits), key=lambda p: (-p[1], p[0]))
    return RankedList(topic_id, tuple(pairs[:k]))


def _normalized(ranking: RankedList, mode: str) -> dict[str, float]:
    n = len(ranking)
    if n == 0:
        return {}
    if mode == "rank":
        if n == 1:
            return {ranking.items[0][0]: 1.0}
        return {d: 1.0 - i / (n - 1) for i, (d, _) in enumerate(ranking.items)}
    scores = ranking.scores
    hi, lo = max(scores), min(scores)
    if hi == lo:
        return {d: 1.0 for d, _ in ranking.items}
    # rounded so that ties survive rescaling of the raw scores
    return {d: round((s - lo) / (hi - lo), _NORM_DIGITS) for d, s in ranking.items}


def fuse(list_a: RankedList, list_b: RankedList, k: int, mode: str = "score") -> RankedList:
    """Sum per-list min-max normalized scores; a missing document contributes 0."""
    if mode not in FUSION_MODES:
        raise ValueError(f"fusion mode must be one of {FUSION_MODES}")
    if list_a.topic_id != list_b.topic_id and len(list_a) and len(list_b):
        raise ValueError(f"cannot fuse rankings of topics {list_a.topic_id} and {list_b.topic_id}")
    if not len(list_a) and not len(list_b):
        raise RetrievalError(f"retrieval failed for topic {list_a.topic_id or list_b.topic_id}: both queries empty")
    fused: dict[str, float] = {}
    for part in (_normalized(list_a, mode), _normalized(list_b, mode)):
        for d, s in part.items():
            fused[d] = fused.get(d, 0.0) + s
    topic = list_a.topic_id if len(list_a) else list_b.topic_id
    return RankedList.from_scores(topic, fused).top(k)


def primary_retrieve(
    protocol: ReviewProtocol,
    index: InvertedIndex,
    dictionary: Dictionary | None = None,
    k: int = DEFAULT_K,
    fusion: str = "score",
    field: str = TITLE_ABSTRACT,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> RankedList:
    dictionary = dictionary or index.dictionary
    runs = []
    for text in (protocol.title, protocol.objectives):
        query = formulate_query(text, dictionary)
        if not query:
            logger.warning("topic %s: a protocol query has no dictionary terms", protocol.topic_id)
        runs.append(retrieve_topk(query, index, k, field, protocol.topic_id, k1, b))
    return fuse(runs[0], runs[1], k, fusion)
