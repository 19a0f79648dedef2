"""Stage 3: relevance feedback inside one review.

A linear SVM is retrained on the reviewer's judgments and the unjudged
candidates are re-ranked by its decision value. The session is a small
state machine so the same engine serves offline simulation and the
interactive service: callers ask for ``current_doc()`` and report a label
with ``record()``.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol

import numba
import numpy as np

from .corpus import TITLE_ABSTRACT, InvertedIndex
from .dataio import EmbeddingTable, Qrels
from .evaluation import evaluate_topic
from .features import FeatureContext, TfIdfVectorizer, sentence_embed
from .ranking import RankedList

logger = logging.getLogger(__name__)

DEFAULT_C = 0.5
DEFAULT_TOL = 1e-4
DEFAULT_MAX_EPOCHS = 2000


class FeedbackError(ValueError):
    pass


class OutOfOrderJudgment(FeedbackError):
    pass


class SessionFinished(FeedbackError):
    pass


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class FeedbackParams:
    k: int = 10
    s_init: int = 1
    t_init: int = 200
    s_final: int = 50
    t_final: int | None = 1000

    def __post_init__(self):
        if self.k < 1:
            raise FeedbackError("k must be >= 1")
        if not 1 <= self.s_init <= self.s_final:
            raise FeedbackError("step sizes must satisfy 1 <= s_init <= s_final")
        if self.t_init < self.k:
            raise FeedbackError("t_init must be >= k")
        if self.t_final is not None and self.t_final < self.t_init:
            raise FeedbackError("t_final must be >= t_init")

    @classmethod
    def parse(cls, text: str) -> FeedbackParams:
        """Parse ``k=10,s_init=1,...``; unspecified keys keep their defaults."""
        values: dict[str, int | None] = {}
        names = {f for f in cls.__dataclass_fields__}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, sep, raw = part.partition("=")
            key = key.strip()
            if not sep or key not in names:
                raise FeedbackError(f"bad parameter {part!r}; expected one of {sorted(names)}")
            raw = raw.strip()
            if key == "t_final" and raw.lower() in ("", "none"):
                values[key] = None
                continue
            try:
                values[key] = int(raw)
            except ValueError:
                raise FeedbackError(f"parameter {key} must be an integer, got {raw!r}") from None
        return cls(**values)

    def for_candidates(self, n: int) -> FeedbackParams:
        """Clamp ``t_final`` to the candidate count."""
        t_final = n if self.t_final is None else min(self.t_final, n)
        if t_final == self.t_final:
            return self
        return _unchecked(self, t_final)

    def to_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        return ",".join(f"{k}={v}" for k, v in asdict(self).items())


def _unchecked(params: FeedbackParams, t_final: int) -> FeedbackParams:
    # t_final may drop below t_init once clamped to a short candidate list
    out = object.__new__(FeedbackParams)
    for k, v in asdict(params).items():
        object.__setattr__(out, k, v)
    object.__setattr__(out, "t_final", t_final)
    return out


# ---------------------------------------------------------------------------
# linear SVM (dual coordinate descent)


@numba.njit(cache=True)
def _svm_gap(X, y, w, alpha, C):
    n = X.shape[0]
    hinge = 0.0
    for i in range(n):
        m = 1.0 - y[i] * np.dot(w, X[i])
        if m > 0:
            hinge += m
    ww = np.dot(w, w)
    primal = 0.5 * ww + C * hinge
    dual = alpha.sum() - 0.5 * ww
    return primal, dual


@numba.njit(cache=True)
def _svm_dual_cd(X, y, C, alpha, tol, max_epochs, seed):
    n, d = X.shape
    np.random.seed(seed)
    w = np.zeros(d)
    for i in range(n):
        if alpha[i] != 0.0:
            w += alpha[i] * y[i] * X[i]
    qii = np.empty(n)
    for i in range(n):
        qii[i] = np.dot(X[i], X[i])
    primal, dual = _svm_gap(X, y, w, alpha, C)
    epochs = 0
    while epochs < max_epochs:
        if primal - dual <= tol * max(1.0, abs(primal)):
            break
        perm = np.random.permutation(n)
        for j in range(n):
            i = perm[j]
            if qii[i] == 0.0:
                continue
            g = y[i] * np.dot(w, X[i]) - 1.0
            a = alpha[i]
            if a == 0.0:
                pg = min(g, 0.0)
            elif a == C:
                pg = max(g, 0.0)
            else:
                pg = g
            if pg != 0.0:
                new = min(max(a - g / qii[i], 0.0), C)
                w += (new - a) * y[i] * X[i]
                alpha[i] = new
        epochs += 1
        primal, dual = _svm_gap(X, y, w, alpha, C)
    return w, epochs, primal, dual


@dataclass
class LinearClassifier:
    weights: np.ndarray
    bias: float
    C: float
    dual: np.ndarray | None = field(default=None, repr=False)
    epochs: int = 0
    gap: float = 0.0

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.weights + self.bias

    def objective(self, X, labels) -> float:
        """Primal value ``0.5*|w|^2 + C * sum(hinge)`` with the bias regularized."""
        y = np.where(np.asarray(labels) > 0, 1.0, -1.0)
        margins = 1.0 - y * self.decision_function(X)
        return 0.5 * (self.weights @ self.weights + self.bias**2) + self.C * np.maximum(margins, 0).sum()


def train_linear_svm(
    X,
    labels,
    C: float = DEFAULT_C,
    tol: float = DEFAULT_TOL,
    max_epochs: int = DEFAULT_MAX_EPOCHS,
    seed: int = 0,
    warm_start: LinearClassifier | None = None,
) -> LinearClassifier:
    """L2-regularized hinge-loss SVM.

    The bias is learned as the weight of a constant feature, so it is
    regularized along with the other weights. Training stops once the
    duality gap falls below ``tol`` relative to the primal objective.
    A warm start reuses the dual variables of a classifier trained on a
    prefix of the same rows.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise FeedbackError("training vectors must form a 2-D array")
    labels = np.asarray(labels)
    if len(labels) != len(X):
        raise FeedbackError("vector and label counts differ")
    if C <= 0:
        raise FeedbackError("C must be positive")
    y = np.where(labels > 0, 1.0, -1.0)
    if len(np.unique(y)) < 2:
        raise FeedbackError("training needs both relevant and irrelevant examples")
    if not np.isfinite(X).all():
        raise FeedbackError("training vectors contain non-finite values")
    Xa = np.ascontiguousarray(np.hstack([X, np.ones((len(X), 1))]))
    alpha = np.zeros(len(X))
    if warm_start is not None and warm_start.dual is not None and warm_start.C == C:
        m = min(len(warm_start.dual), len(X))
        alpha[:m] = warm_start.dual[:m]
    w, epochs, primal, dual = _svm_dual_cd(Xa, y, float(C), alpha, float(tol), int(max_epochs), int(seed))
    gap = primal - dual
    if gap > tol * max(1.0, abs(primal)):
        logger.warning("SVM stopped after %d epochs with relative gap %.2e", epochs, gap / max(1.0, abs(primal)))
    return LinearClassifier(w[:-1].copy(), float(w[-1]), float(C), alpha, int(epochs), float(gap))


class Scorer(Protocol):
    def decision_function(self, X) -> np.ndarray: ...


Trainer = Callable[[np.ndarray, np.ndarray, "Scorer | None"], Scorer]


def svm_trainer(C: float = DEFAULT_C, seed: int = 0, tol: float = DEFAULT_TOL) -> Trainer:
    def fit(X, y, previous):
        warm = previous if isinstance(previous, LinearClassifier) else None
        return train_linear_svm(X, y, C=C, tol=tol, seed=seed, warm_start=warm)

    fit.C = C  # type: ignore[attr-defined]
    return fit


# ---------------------------------------------------------------------------
# document representations


def document_vectors(
    index: InvertedIndex,
    doc_ids: Sequence[str],
    sent_embeddings: EmbeddingTable | None = None,
    representation: str = "sent2vec",
) -> np.ndarray:
    """Row-aligned vectors for ``doc_ids`` from title+abstract text."""
    if representation == "sent2vec":
        if sent_embeddings is None:
            raise FeedbackError("sent2vec representation needs a sentence embedding table")
        out = np.zeros((len(doc_ids), sent_embeddings.dim))
        for i, d in enumerate(doc_ids):
            out[i] = sentence_embed(index.document(d).text, sent_embeddings)
        return out
    if representation == "tfidf":
        vec = TfIdfVectorizer.from_index(index)
        rows = [index.doc_position(d) for d in doc_ids]
        m = FeatureContext(index, vec).doc_tfidf(TITLE_ABSTRACT)[rows]
        norms = np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel())
        norms[norms == 0] = 1.0
        return np.asarray(m.toarray()) / norms[:, None]
    raise FeedbackError(f"unknown representation {representation!r}")


# ---------------------------------------------------------------------------
# session state machine


@dataclass(frozen=True)
class TraceRow:
    step: int
    doc_id: str
    label: int
    judged: int
    round: int
    batch_size: int


TRACE_HEADER = ("step", "judged_doc", "label", "judged_count", "round", "batch_size")


class Phase(str, Enum):
    BOOTSTRAPPING = "bootstrapping"
    ITERATING = "iterating"
    FINISHED = "finished"


@dataclass(frozen=True)
class Batch:
    round: int
    start: int
    size: int
    step: int
    retrained: bool


@dataclass(frozen=True)
class JudgmentOutcome:
    doc_id: str
    label: int
    judged: int
    phase: Phase
    retrained: bool
    step: int
    step_changed: bool
    next_doc: str | None


class ScreeningSession:
    """One review's screening state.

    ``final_ranking`` holds judged documents in judgment order; ``pending``
    holds the rest in their current order, whose first ``queue_size``
    entries form the batch being served.
    """

    def __init__(
        self,
        candidates: RankedList,
        doc_vectors: np.ndarray | Mapping[str, np.ndarray],
        params: FeedbackParams | None = None,
        trainer: Trainer | None = None,
        seed: int = 0,
        C: float = DEFAULT_C,
    ):
        if not len(candidates):
            raise FeedbackError(f"topic {candidates.topic_id}: empty candidate list")
        self.topic_id = candidates.topic_id
        self.candidates = candidates
        self.order: list[str] = candidates.doc_ids
        self._pos = {d: i for i, d in enumerate(self.order)}
        if isinstance(doc_vectors, Mapping):
            missing = [d for d in self.order if d not in doc_vectors]
            if missing:
                raise FeedbackError(f"no vector for {len(missing)} candidates, e.g. {missing[0]!r}")
            self.vectors = np.vstack([np.asarray(doc_vectors[d], dtype=np.float64) for d in self.order])
        else:
            self.vectors = np.asarray(doc_vectors, dtype=np.float64)
            if self.vectors.ndim != 2 or len(self.vectors) != len(self.order):
                raise FeedbackError("doc_vectors must have one row per candidate")
        self.requested_params = params or FeedbackParams()
        self.params = self.requested_params.for_candidates(len(self.order))
        self.seed = seed
        self.C = C
        self.trainer = trainer or svm_trainer(C=C, seed=seed)
        # doc ids ranked lexicographically, for deterministic tie-breaks
        self._name_rank = np.argsort(np.argsort(np.array(self.order, dtype=object), kind="stable"), kind="stable")

        self.final_ranking: list[tuple[str, int]] = []
        self._labels: dict[str, int] = {}
        self.pending: list[int] = list(range(len(self.order)))
        self.queue_size = min(self.params.k, len(self.order))
        self.phase = Phase.BOOTSTRAPPING
        self.classifier: Scorer | None = None
        self.one_class = False
        self.batches: list[Batch] = [Batch(0, 0, self.queue_size, self.queue_size, False)]
        self.retrain_count = 0
        self.trace: list[TraceRow] = []

    # -- queries -----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def judged_count(self) -> int:
        return len(self.final_ranking)

    @property
    def relevant_found(self) -> int:
        return sum(lab for _, lab in self.final_ranking)

    @property
    def judged_ids(self) -> list[str]:
        return [d for d, _ in self.final_ranking]

    @property
    def pending_ids(self) -> list[str]:
        return [self.order[i] for i in self.pending]

    @property
    def round(self) -> int:
        return self.batches[-1].round

    @property
    def current_step(self) -> int:
        return self.batches[-1].step

    def current_doc(self) -> str | None:
        if self.phase is Phase.FINISHED or not self.pending:
            return None
        return self.order[self.pending[0]]

    def label_of(self, doc_id: str) -> int | None:
        return self._labels.get(doc_id)

    # -- transitions -------------------------------------------------------

    def record(self, doc_id: str, label: int | bool) -> JudgmentOutcome:
        if self.phase is Phase.FINISHED:
            raise SessionFinished(f"session {self.topic_id} is finished")
        if doc_id in self._labels:
            raise OutOfOrderJudgment(f"document {doc_id!r} was already judged")
        expected = self.current_doc()
        if doc_id != expected:
            raise OutOfOrderJudgment(f"expected a judgment for {expected!r}, got {doc_id!r}")
        lab = 1 if int(label) > 0 else 0
        batch = self.batches[-1]
        self.pending.pop(0)
        self.final_ranking.append((doc_id, lab))
        self._labels[doc_id] = lab
        self.queue_size -= 1
        self.trace.append(TraceRow(self.judged_count, doc_id, lab, self.judged_count, batch.round, batch.size))
        retrained = step_changed = False
        if self.queue_size == 0:
            prev_step = self.current_step
            prev_phase = self.phase
            retrained = self._advance()
            step_changed = (
                retrained and prev_phase is Phase.ITERATING and self.phase is Phase.ITERATING
                and self.current_step != prev_step
            )
        return JudgmentOutcome(doc_id, lab, self.judged_count, self.phase, retrained, self.current_step, step_changed, self.current_doc())

    def _both_classes(self) -> bool:
        r = self.relevant_found
        return 0 < r < self.judged_count

    def _advance(self) -> bool:
        if self.phase is Phase.BOOTSTRAPPING:
            if not self._both_classes():
                if not self.pending:
                    self.phase = Phase.FINISHED
                    self.one_class = True
                    logger.warning("topic %s: candidates exhausted with a single label class", self.topic_id)
                    return False
                self.queue_size = 1
                self.batches.append(Batch(0, self.judged_count, 1, 1, False))
                return False
            self.phase = Phase.ITERATING
        return self._next_batch()

    def _next_batch(self) -> bool:
        p = self.params
        judged = self.judged_count
        if not self.pending or judged >= p.t_final:
            self.phase = Phase.FINISHED
            return False
        self._retrain()
        step = p.s_init if judged < p.t_init else p.s_final
        size = min(step, p.t_final - judged, len(self.pending))
        self.queue_size = size
        self.batches.append(Batch(self.round + 1, judged, size, step, True))
        return True

    def _retrain(self) -> None:
        rows = [self._pos[d] for d, _ in self.final_ranking]
        y = np.array([lab for _, lab in self.final_ranking])
        self.classifier = self.trainer(self.vectors[rows], y, self.classifier)
        self.retrain_count += 1
        self._rerank_pending()

    def _rerank_pending(self) -> None:
        if not self.pending or self.classifier is None:
            return
        idx = np.array(self.pending)
        scores = np.asarray(self.classifier.decision_function(self.vectors[idx]), dtype=np.float64)
        order = np.lexsort((self._name_rank[idx], -scores))
        self.pending = idx[order].tolist()

    # -- outputs -----------------------------------------------------------

    def final_list(self) -> RankedList:
        """Judged documents in judgment order, then pending in current order."""
        return RankedList.from_order(self.topic_id, self.judged_ids + self.pending_ids)

    def to_dict(self) -> dict:
        return {
            "format": "tarscreen-session",
            "version": 1,
            "topic_id": self.topic_id,
            "params": self.requested_params.to_dict(),
            "seed": self.seed,
            "C": self.C,
            "candidates": [[d, s] for d, s in self.candidates.items],
            "judgments": [[d, lab] for d, lab in self.final_ranking],
        }

    @classmethod
    def from_dict(
        cls,
        obj: Mapping,
        doc_vectors: np.ndarray | Mapping[str, np.ndarray],
        trainer: Trainer | None = None,
    ) -> ScreeningSession:
        """Rebuild a session by replaying its judgments; training is deterministic."""
        candidates = RankedList(obj["topic_id"], tuple((d, s) for d, s in obj["candidates"]))
        params = FeedbackParams(**obj["params"])
        sess = cls(candidates, doc_vectors, params, trainer=trainer, seed=obj.get("seed", 0), C=obj.get("C", DEFAULT_C))
        for d, lab in obj["judgments"]:
            sess.record(d, lab)
        return sess


def emit_final_ranking(session: ScreeningSession) -> RankedList:
    if session.phase is not Phase.FINISHED:
        raise FeedbackError(f"session {session.topic_id} is not finished")
    return session.final_list()


# ---------------------------------------------------------------------------
# reviewers and simulation


class Reviewer(Protocol):
    def judge(self, doc_id: str) -> int: ...


class OracleReviewer:
    """Answers from qrels; unjudged documents count as irrelevant."""

    def __init__(self, relevant: Iterable[str]):
        self.relevant = frozenset(relevant)
        self.calls: list[str] = []

    @classmethod
    def from_qrels(cls, qrels: Qrels, topic_id: str) -> OracleReviewer:
        return cls(qrels.relevant(topic_id))

    def judge(self, doc_id: str) -> int:
        self.calls.append(doc_id)
        return int(doc_id in self.relevant)


def _judge_one(session: ScreeningSession, reviewer: Reviewer) -> JudgmentOutcome:
    doc = session.current_doc()
    return session.record(doc, reviewer.judge(doc))


def bootstrap(session: ScreeningSession, reviewer: Reviewer) -> ScreeningSession:
    """Judge the top-k, then one at a time until both classes are seen."""
    if session.phase is not Phase.BOOTSTRAPPING:
        raise FeedbackError("bootstrap requires the bootstrapping phase")
    while session.phase is Phase.BOOTSTRAPPING:
        _judge_one(session, reviewer)
    return session


def iterate(session: ScreeningSession, reviewer: Reviewer) -> ScreeningSession:
    if session.phase is not Phase.ITERATING:
        raise FeedbackError("iterate requires the iterating phase")
    while session.phase is Phase.ITERATING:
        _judge_one(session, reviewer)
    return session


@dataclass
class SimulationResult:
    ranking: RankedList
    trace: list[TraceRow]
    session: object
    one_class: bool = False

    @property
    def judged_sequence(self) -> list[str]:
        return [r.doc_id for r in self.trace]


def simulate(
    candidates: RankedList,
    doc_vectors: np.ndarray | Mapping[str, np.ndarray],
    reviewer: Reviewer,
    params: FeedbackParams | None = None,
    trainer: Trainer | None = None,
    seed: int = 0,
    C: float = DEFAULT_C,
) -> SimulationResult:
    session = ScreeningSession(candidates, doc_vectors, params, trainer=trainer, seed=seed, C=C)
    bootstrap(session, reviewer)
    if session.phase is Phase.ITERATING:
        iterate(session, reviewer)
    return SimulationResult(emit_final_ranking(session), session.trace, session, session.one_class)


def write_trace(trace: Iterable[TraceRow], path: str | Path, topic_id: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((("topic_id",) if topic_id is not None else ()) + TRACE_HEADER)
        for r in trace:
            prefix = (topic_id,) if topic_id is not None else ()
            w.writerow(prefix + (r.step, r.doc_id, r.label, r.judged, r.round, r.batch_size))


def read_trace(path: str | Path) -> list[TraceRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                TraceRow(int(rec["step"]), rec["judged_doc"], int(rec["label"]), int(rec["judged_count"]),
                         int(rec["round"]), int(rec["batch_size"]))
            )
    return rows


# ---------------------------------------------------------------------------
# parameter sweep


@dataclass
class SweepTopic:
    candidates: RankedList
    doc_vectors: np.ndarray
    relevant: set[str]


SWEEP_COLUMNS = ("t_init", "t_final", "recall@5000", "map", "wss100", "last_rel")


def parameter_sweep(
    topics: Sequence[SweepTopic],
    grid: Iterable[tuple[int, int]],
    base: FeedbackParams | None = None,
    seed: int = 0,
    C: float = DEFAULT_C,
) -> list[dict]:
    """One macro-averaged metric row per ``(t_init, t_final)`` pair."""
    base = base or FeedbackParams()
    rows = []
    for t_init, t_final in grid:
        params = replace(base, t_init=t_init, t_final=t_final)
        per_topic = []
        for t in topics:
            if not t.relevant:
                continue
            res = simulate(t.candidates, t.doc_vectors, OracleReviewer(t.relevant), params, seed=seed, C=C)
            per_topic.append(evaluate_topic(res.ranking, t.relevant, (5000,)))
        if not per_topic:
            raise FeedbackError("parameter sweep needs topics with relevant documents")
        rows.append({
            "t_init": t_init,
            "t_final": t_final,
            "recall@5000": float(np.mean([m.recall_at[5000] for m in per_topic])),
            "map": float(np.mean([m.map for m in per_topic])),
            "wss100": float(np.mean([m.wss100 for m in per_topic])),
            "last_rel": float(np.mean([m.last_rel for m in per_topic])),
        })
    return rows
