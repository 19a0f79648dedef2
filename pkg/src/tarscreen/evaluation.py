"""Total-recall metrics, macro reports, recall curves and method comparisons."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .dataio import Qrels
from .ranking import RankedList

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (10, 50, 100, 5000)


class EvaluationError(ValueError):
    pass


def _ids(ranking) -> list[str]:
    return ranking.doc_ids if isinstance(ranking, RankedList) else list(ranking)


def recall_at(ranking, relevant: set[str], threshold: int) -> float:
    if threshold < 1:
        raise EvaluationError("threshold must be >= 1")
    if not relevant:
        raise EvaluationError("recall is undefined for a topic without relevant documents")
    top = _ids(ranking)[:threshold]
    return sum(1 for d in top if d in relevant) / len(relevant)


def average_precision(ranking, relevant: set[str]) -> float:
    """Mean precision at the ranks of relevant documents; missing ones count 0."""
    if not relevant:
        raise EvaluationError("average precision is undefined for a topic without relevant documents")
    hits = 0
    total = 0.0
    for rank, d in enumerate(_ids(ranking), 1):
        if d in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def last_rel(ranking, relevant: set[str]) -> int:
    """1-based rank of the deepest relevant document."""
    if not relevant:
        raise EvaluationError("last_rel is undefined for a topic without relevant documents")
    ids = _ids(ranking)
    ranks = [r for r, d in enumerate(ids, 1) if d in relevant]
    if len(ranks) < len(relevant):
        raise EvaluationError(
            f"{len(relevant) - len(ranks)} relevant documents are missing from the ranking; 100% recall is unreachable"
        )
    return ranks[-1]


def wss100(ranking, relevant: set[str], n: int | None = None) -> float:
    """Work saved over sampling at full recall, ``(n - last_rel) / n``."""
    n = len(_ids(ranking)) if n is None else n
    return (n - last_rel(ranking, relevant)) / n


@dataclass
class TopicMetrics:
    topic_id: str
    recall_at: dict[int, float]
    map: float
    wss100: float
    last_rel: int
    n: int
    n_relevant: int
    complete: bool = True

    def to_dict(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "map": self.map,
            "wss100": self.wss100,
            "last_rel": self.last_rel,
            "n": self.n,
            "n_relevant": self.n_relevant,
            "complete": self.complete,
        }


def evaluate_topic(ranking, relevant: set[str], thresholds: Sequence[int] = DEFAULT_THRESHOLDS, topic_id: str = "") -> TopicMetrics:
    """Per-topic metrics.

    When some relevant documents were never retrieved, last_rel is the rank
    of the deepest retrieved relevant document and ``complete`` is False.
    """
    ids = _ids(ranking)
    n = len(ids)
    retrieved = [r for r, d in enumerate(ids, 1) if d in relevant]
    complete = len(retrieved) == len(relevant)
    deepest = retrieved[-1] if retrieved else n
    return TopicMetrics(
        topic_id=topic_id or (ranking.topic_id if isinstance(ranking, RankedList) else ""),
        recall_at={t: recall_at(ids, relevant, t) for t in thresholds},
        map=average_precision(ids, relevant),
        wss100=(n - deepest) / n if n else 0.0,
        last_rel=deepest,
        n=n,
        n_relevant=len(relevant),
        complete=complete,
    )


@dataclass
class MetricsReport:
    name: str
    thresholds: tuple[int, ...]
    topics: dict[str, TopicMetrics]
    excluded: list[str] = field(default_factory=list)

    @property
    def macro(self) -> dict[str, float]:
        ts = list(self.topics.values())
        if not ts:
            return {}
        out = {f"recall@{t}": float(np.mean([m.recall_at[t] for m in ts])) for t in self.thresholds}
        out["map"] = float(np.mean([m.map for m in ts]))
        out["wss100"] = float(np.mean([m.wss100 for m in ts]))
        out["last_rel"] = float(np.mean([m.last_rel for m in ts]))
        return out

    @property
    def columns(self) -> list[str]:
        return [f"recall@{t}" for t in self.thresholds] + ["map", "wss100", "last_rel"]

    def subset(self, topic_ids: Iterable[str], name: str | None = None) -> MetricsReport:
        keep = set(topic_ids)
        return MetricsReport(name or self.name, self.thresholds, {t: m for t, m in self.topics.items() if t in keep})

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "thresholds": list(self.thresholds),
            "macro": self.macro,
            "n_topics": len(self.topics),
            "excluded_topics": self.excluded,
            "topics": {t: m.to_dict() for t, m in sorted(self.topics.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["topic_id"] + self.columns + ["n", "n_relevant", "complete"])
        for t, m in sorted(self.topics.items()):
            w.writerow([t] + [m.recall_at[k] for k in self.thresholds] + [m.map, m.wss100, m.last_rel, m.n, m.n_relevant, m.complete])
        return buf.getvalue()


def evaluate_run(
    runs: Mapping[str, RankedList],
    qrels: Qrels,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    name: str = "run",
) -> MetricsReport:
    topics, excluded = {}, []
    for topic_id, ranking in sorted(runs.items()):
        relevant = qrels.relevant(topic_id)
        if not relevant:
            excluded.append(topic_id)
            continue
        topics[topic_id] = evaluate_topic(ranking, relevant, thresholds, topic_id)
    if excluded:
        logger.warning("%s: %d topics without relevant documents excluded from averages", name, len(excluded))
    return MetricsReport(name, tuple(thresholds), topics, excluded)


def recall_curve(trace: Sequence[str], relevant: set[str], depth: int = 200) -> list[tuple[int, float]]:
    """Recall after each of the first ``depth`` judged documents."""
    if not relevant:
        raise EvaluationError("recall curve is undefined without relevant documents")
    out, hits = [], 0
    for i, d in enumerate(trace[:depth], 1):
        hits += d in relevant
        out.append((i, hits / len(relevant)))
    return out


@dataclass
class CurvePoint:
    judged: int
    mean: float
    lower: float
    upper: float
    n_topics: int


def macro_curve(curves: Sequence[Sequence[tuple[int, float]]], depth: int = 200) -> list[CurvePoint]:
    """Pointwise mean recall with a normal-approximation 95% interval.

    A topic whose trace ends before ``depth`` carries its final recall forward.
    """
    if not curves:
        return []
    arr = np.zeros((len(curves), depth))
    for i, c in enumerate(curves):
        vals = [v for _, v in c][:depth]
        last = vals[-1] if vals else 0.0
        arr[i, : len(vals)] = vals
        arr[i, len(vals):] = last
    mean = arr.mean(axis=0)
    if len(curves) > 1:
        half = 1.96 * arr.std(axis=0, ddof=1) / math.sqrt(len(curves))
    else:
        half = np.zeros(depth)
    return [CurvePoint(j + 1, float(mean[j]), float(mean[j] - half[j]), float(mean[j] + half[j]), len(curves)) for j in range(depth)]


def curve_csv(points: Iterable[CurvePoint], method: str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["method", "judged", "recall_mean", "ci95_lower", "ci95_upper", "n_topics"])
    for p in points:
        w.writerow([method, p.judged, p.mean, p.lower, p.upper, p.n_topics])
    return buf.getvalue()


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[tuple[str, dict[str, float]]]
    best: dict[str, str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method"] + self.columns)
        for name, vals in self.rows:
            w.writerow([name] + [vals[c] for c in self.columns])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max([len(n) for n, _ in self.rows] + [6])
        lines = [" " * width + "".join(f"{c:>14}" for c in self.columns)]
        for name, vals in self.rows:
            cells = []
            for c in self.columns:
                v = vals[c]
                mark = "*" if self.best.get(c) == name else " "
                cells.append(f"{v:>13.4f}{mark}" if c != "last_rel" else f"{v:>13.1f}{mark}")
            lines.append(f"{name:<{width}}" + "".join(cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": [{"method": n, **v} for n, v in self.rows], "best": self.best}


def compare(reports: Sequence[MetricsReport]) -> ComparisonTable:
    """Align macro metrics of several reports; flag the best value per column."""
    if not reports:
        raise EvaluationError("nothing to compare")
    topic_set = set(reports[0].topics)
    for r in reports[1:]:
        if set(r.topics) != topic_set:
            raise EvaluationError(f"report {r.name!r} covers a different topic set than {reports[0].name!r}")
    columns = reports[0].columns
    rows = [(r.name, r.macro) for r in reports]
    best = {}
    for c in columns:
        pick = min if c == "last_rel" else max
        best[c] = pick(rows, key=lambda nr: nr[1][c])[0]
    return ComparisonTable(columns, rows, best)
