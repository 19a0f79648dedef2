"""Session registry backed by append-only journal files.

Each session owns ``<data_dir>/sessions/<id>.jsonl``. The first line
records how the session was created; every later line is one judgment.
Starting a store replays every journal, so a restart loses nothing that
was acknowledged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..corpus import InvertedIndex
from ..dataio import Qrels, parse_qrels, read_run
from ..feedback import FeedbackParams, JudgmentOutcome, ScreeningSession
from ..ranking import RankedList

logger = logging.getLogger(__name__)


class StoreError(Exception):
    status = 400


class NotFound(StoreError):
    status = 404


class Conflict(StoreError):
    status = 409


class Gone(StoreError):
    status = 410

    def __init__(self, message: str, final: str | None = None):
        super().__init__(message)
        self.final = final


class Invalid(StoreError):
    status = 422


@dataclass
class TopicArtifacts:
    topic_id: str
    review_type: str
    title: str
    candidates_path: Path
    vectors_path: Path
    _candidates: RankedList | None = None
    _vectors: np.ndarray | None = None

    @property
    def candidates(self) -> RankedList:
        if self._candidates is None:
            runs = read_run(self.candidates_path)
            if self.topic_id not in runs:
                raise NotFound(f"run file {self.candidates_path} has no topic {self.topic_id}")
            self._candidates = runs[self.topic_id]
        return self._candidates

    @property
    def vectors(self) -> np.ndarray:
        if self._vectors is None:
            self._vectors = np.load(self.vectors_path)
        return self._vectors


class Artifacts:
    """Read-only view of a pipeline output directory (``artifacts.json``)."""

    def __init__(self, root: str | Path, with_qrels: bool = True):
        self.root = Path(root)
        manifest_path = self.root / "artifacts.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no artifacts.json in {self.root}")
        m = json.loads(manifest_path.read_text())
        self.manifest = m
        self.defaults = FeedbackParams(**m.get("feedback", {}))
        self.C = float(m.get("C", 0.5))
        self.seed = int(m.get("seed", 0))
        self.topics = {
            t: TopicArtifacts(t, v["review_type"], v["title"], self.root / v["candidates"], self.root / v["vectors"])
            for t, v in m["topics"].items()
        }
        self._index_path = self.root / m["index"]
        self._index: InvertedIndex | None = None
        self._lock = threading.Lock()
        self.qrels: Qrels | None = None
        if with_qrels and m.get("qrels") and (self.root / m["qrels"]).exists():
            self.qrels = parse_qrels(self.root / m["qrels"])

    @property
    def index(self) -> InvertedIndex:
        with self._lock:
            if self._index is None:
                self._index = InvertedIndex.load(self._index_path)
            return self._index

    def topic(self, topic_id: str) -> TopicArtifacts:
        try:
            return self.topics[topic_id]
        except KeyError:
            raise NotFound(f"unknown topic {topic_id!r}") from None


@dataclass
class LiveSession:
    session_id: str
    topic_id: str
    engine: ScreeningSession
    journal: Path
    writer: threading.Lock
    state: threading.RLock
    judgment_keys: dict[str, dict]


def _body_hash(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class SessionStore:
    def __init__(self, artifacts: Artifacts, data_dir: str | Path):
        self.artifacts = artifacts
        self.dir = Path(data_dir) / "sessions"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, LiveSession] = {}
        self.create_keys: dict[str, tuple[str, str]] = {}
        self._lock = threading.Lock()
        self._replay_all()

    # -- journal -----------------------------------------------------------

    @staticmethod
    def _append(path: Path, record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def _replay_all(self) -> None:
        for path in sorted(self.dir.glob("*.jsonl")):
            try:
                self._replay(path)
            except Exception as exc:  # a damaged journal must not take down the others
                logger.error("cannot restore session journal %s: %s", path, exc)

    def _replay(self, path: Path) -> None:
        raw = path.read_bytes()
        lines = raw.split(b"\n")
        records = []
        good = 0
        for i, ln in enumerate(lines):
            if not ln.strip():
                good += len(ln) + 1
                continue
            try:
                records.append(json.loads(ln))
            except json.JSONDecodeError:
                if all(not rest.strip() for rest in lines[i + 1:]):
                    logger.warning("%s: dropping a torn trailing record", path)
                    # cut it off so later appends start on a clean line
                    with open(path, "r+b") as fh:
                        fh.truncate(good)
                    break
                raise
            good += len(ln) + 1
        head = records[0]
        live = self._open(head["session_id"], head["topic_id"], head["params"], head["seed"], path)
        for rec in records[1:]:
            out = live.engine.record(rec["doc_id"], rec["label"])
            if rec.get("idempotency_key"):
                live.judgment_keys[rec["idempotency_key"]] = self._outcome_dict(live, out)
        if head.get("idempotency_key"):
            self.create_keys[head["idempotency_key"]] = (head["body_hash"], head["session_id"])
        self.sessions[live.session_id] = live
        logger.info("restored session %s (%d judgments)", live.session_id, live.engine.judged_count)

    def _open(self, session_id: str, topic_id: str, params: dict, seed: int, journal: Path) -> LiveSession:
        topic = self.artifacts.topic(topic_id)
        engine = ScreeningSession(topic.candidates, topic.vectors, FeedbackParams(**params), seed=seed, C=self.artifacts.C)
        return LiveSession(session_id, topic_id, engine, journal, threading.Lock(), threading.RLock(), {})

    # -- operations --------------------------------------------------------

    def create(self, topic_id: str, params: dict | None, seed: int | None, idempotency_key: str | None = None) -> tuple[LiveSession, bool]:
        """Open a session; returns ``(session, created)``."""
        body = {"topic_id": topic_id, "params": params, "seed": seed}
        digest = _body_hash(body)
        with self._lock:
            if idempotency_key and idempotency_key in self.create_keys:
                prev_hash, sid = self.create_keys[idempotency_key]
                if prev_hash != digest:
                    raise Conflict("idempotency key was already used with a different request body")
                return self.sessions[sid], False
            self.artifacts.topic(topic_id)
            merged = {**self.artifacts.defaults.to_dict(), **(params or {})}
            try:
                FeedbackParams(**merged)
            except ValueError as exc:
                raise Invalid(str(exc)) from exc
            sid = uuid.uuid4().hex
            journal = self.dir / f"{sid}.jsonl"
            seed = self.artifacts.seed if seed is None else seed
            live = self._open(sid, topic_id, merged, seed, journal)
            head = {"type": "create", "session_id": sid, "topic_id": topic_id, "params": merged, "seed": seed,
                    "idempotency_key": idempotency_key, "body_hash": digest}
            self._append(journal, head)
            self.sessions[sid] = live
            if idempotency_key:
                self.create_keys[idempotency_key] = (digest, sid)
            return live, True

    def get(self, session_id: str) -> LiveSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise NotFound(f"unknown session {session_id!r}") from None

    @staticmethod
    def _outcome_dict(live: LiveSession, out: JudgmentOutcome) -> dict:
        return {
            "doc_id": out.doc_id,
            "label": out.label,
            "judged": out.judged,
            "relevant_found": live.engine.relevant_found,
            "phase": out.phase.value,
            "retrained": out.retrained,
            "step": out.step,
            "step_changed": out.step_changed,
            "next_doc_id": out.next_doc,
        }

    def judge(self, session_id: str, doc_id: str, label: int, idempotency_key: str | None = None) -> dict:
        live = self.get(session_id)
        # single writer per session; readers wait on ``state`` instead
        if not live.writer.acquire(blocking=False):
            raise Conflict("session is being modified by another request")
        live.state.acquire()
        try:
            if idempotency_key and idempotency_key in live.judgment_keys:
                return live.judgment_keys[idempotency_key]
            eng = live.engine
            if eng.current_doc() is None:
                raise Conflict("session is finished")
            if doc_id != eng.current_doc():
                raise Conflict(f"document {doc_id!r} is not the one being served ({eng.current_doc()!r})")
            # journal first: an acknowledged judgment is always durable
            self._append(live.journal, {"type": "judgment", "doc_id": doc_id, "label": int(label),
                                        "idempotency_key": idempotency_key})
            out = eng.record(doc_id, label)
            result = self._outcome_dict(live, out)
            if idempotency_key:
                live.judgment_keys[idempotency_key] = result
            return result
        finally:
            live.state.release()
            live.writer.release()

    def recall_if_oracle(self, live: LiveSession) -> float | None:
        q = self.artifacts.qrels
        if q is None:
            return None
        rel = q.relevant(live.topic_id)
        if not rel:
            return None
        return sum(1 for d, _ in live.engine.final_ranking if d in rel) / len(rel)
