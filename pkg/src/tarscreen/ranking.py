from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field


@dataclass(frozen=True)
class RankedList:
    """Ordered ``(doc_id, score)`` pairs for one topic.

    Scores are non-increasing and equal scores are ordered by ascending doc id.
    """

    topic_id: str
    items: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple((str(d), float(s)) for d, s in self.items))
        seen = set()
        prev = None
        for doc_id, score in self.items:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id {doc_id!r} in ranking for {self.topic_id}")
            seen.add(doc_id)
            if prev is not None and (score > prev[1] or (score == prev[1] and doc_id < prev[0])):
                raise ValueError(
                    f"ranking for {self.topic_id} is not sorted by (score desc, doc_id asc) at {doc_id!r}"
                )
            prev = (doc_id, score)

    @classmethod
    def from_scores(cls, topic_id: str, scores: Mapping[str, float] | Iterable[tuple[str, float]]) -> RankedList:
        pairs = scores.items() if isinstance(scores, Mapping) else scores
        return cls(topic_id, tuple(sorted(pairs, key=lambda p: (-p[1], p[0]))))

    @classmethod
    def from_order(cls, topic_id: str, doc_ids: Iterable[str]) -> RankedList:
        """Wrap an already decided order with synthetic descending scores."""
        ids = list(doc_ids)
        n = len(ids)
        return cls(topic_id, tuple((d, float(n - i)) for i, d in enumerate(ids)))

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.items]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.items]

    def top(self, k: int) -> RankedList:
        return RankedList(self.topic_id, self.items[:k])

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)
