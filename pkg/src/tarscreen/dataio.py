"""Readers and writers for protocols, qrels, embedding tables and run files."""

from __future__ import annotations

import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .ranking import RankedList

logger = logging.getLogger(__name__)


class DataFormatError(ValueError):
    pass


class ReviewType(str, Enum):
    DTA = "DTA"
    INTERVENTION = "Intervention"
    QUALITATIVE = "Qualitative"
    PROGNOSIS = "Prognosis"


class ProtocolField(str, Enum):
    TITLE = "Title"
    OBJECTIVES = "Objectives"
    TYPES_OF_STUDIES = "TypesOfStudies"
    TYPES_OF_PARTICIPANTS = "TypesOfParticipants"
    INDEX_TESTS = "IndexTests"
    TARGET_CONDITIONS = "TargetConditions"
    REFERENCE_STANDARDS = "ReferenceStandards"
    TYPES_OF_INTERVENTION = "TypesOfIntervention"
    TYPES_OF_OUTCOME_MEASURES = "TypesOfOutcomeMeasures"


PROTOCOL_FIELDS: tuple[ProtocolField, ...] = tuple(ProtocolField)
_COMMON = PROTOCOL_FIELDS[:4]

ADMITTED_FIELDS: dict[ReviewType, tuple[ProtocolField, ...]] = {
    ReviewType.DTA: PROTOCOL_FIELDS[:7],
    ReviewType.INTERVENTION: _COMMON
    + (ProtocolField.TYPES_OF_INTERVENTION, ProtocolField.TYPES_OF_OUTCOME_MEASURES),
    ReviewType.PROGNOSIS: _COMMON + (ProtocolField.TYPES_OF_OUTCOME_MEASURES,),
    ReviewType.QUALITATIVE: _COMMON,
}

# Present for every review type; only Title and Objectives must carry text.
REQUIRED_FIELDS = _COMMON
NONEMPTY_FIELDS = (ProtocolField.TITLE, ProtocolField.OBJECTIVES)


@dataclass(frozen=True)
class ReviewProtocol:
    topic_id: str
    review_type: ReviewType
    fields: Mapping[ProtocolField, str]

    def __post_init__(self):
        object.__setattr__(self, "review_type", ReviewType(self.review_type))
        object.__setattr__(self, "fields", {ProtocolField(k): v for k, v in self.fields.items()})
        admitted = ADMITTED_FIELDS[self.review_type]
        for name in self.fields:
            if name not in admitted:
                raise DataFormatError(
                    f"protocol {self.topic_id}: field {name.value} is not valid for review type "
                    f"{self.review_type.value}"
                )
        for name in REQUIRED_FIELDS:
            if name not in self.fields:
                raise DataFormatError(f"protocol {self.topic_id}: missing required field {name.value}")
        for name in NONEMPTY_FIELDS:
            if not self.fields[name].strip():
                raise DataFormatError(f"protocol {self.topic_id}: field {name.value} is empty")

    def get(self, name: ProtocolField) -> str:
        return self.fields.get(name, "")

    @property
    def title(self) -> str:
        return self.fields[ProtocolField.TITLE]

    @property
    def objectives(self) -> str:
        return self.fields[ProtocolField.OBJECTIVES]

    def to_dict(self) -> dict:
        return {
            "topic_id": self.topic_id,
            "review_type": self.review_type.value,
            "fields": {k.value: v for k, v in self.fields.items()},
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> ReviewProtocol:
        try:
            topic_id = str(obj["topic_id"])
            rtype = obj["review_type"]
            raw_fields = obj["fields"]
        except KeyError as exc:
            raise DataFormatError(f"protocol is missing key {exc.args[0]!r}") from None
        try:
            review_type = ReviewType(rtype)
        except ValueError:
            raise DataFormatError(f"protocol {topic_id}: unknown review type {rtype!r}") from None
        fields = {}
        for name, text in raw_fields.items():
            try:
                fields[ProtocolField(name)] = "" if text is None else str(text)
            except ValueError:
                raise DataFormatError(f"protocol {topic_id}: unknown field name {name!r}") from None
        return cls(topic_id, review_type, fields)


def parse_protocol(path: str | Path) -> ReviewProtocol:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc
    return ReviewProtocol.from_dict(obj)


def write_protocol(protocol: ReviewProtocol, path: str | Path) -> None:
    Path(path).write_text(json.dumps(protocol.to_dict(), indent=2, ensure_ascii=False), encoding="utf-8")


def load_protocols(directory: str | Path) -> dict[str, ReviewProtocol]:
    out = {}
    for p in sorted(Path(directory).glob("*.json")):
        proto = parse_protocol(p)
        if proto.topic_id in out:
            raise DataFormatError(f"duplicate protocol for topic {proto.topic_id} in {directory}")
        out[proto.topic_id] = proto
    return out


class QrelsLevel(str, Enum):
    ABSTRACT = "abstract"
    CONTENT = "content"


@dataclass
class Qrels:
    entries: dict[str, dict[str, int]] = field(default_factory=dict)
    level: QrelsLevel = QrelsLevel.CONTENT

    def relevant(self, topic_id: str) -> set[str]:
        return {d for d, lab in self.entries.get(topic_id, {}).items() if lab}

    def label(self, topic_id: str, doc_id: str) -> int:
        return self.entries.get(topic_id, {}).get(doc_id, 0)

    @property
    def topics(self) -> list[str]:
        return sorted(self.entries)

    def restrict(self, topics: Iterable[str]) -> Qrels:
        keep = set(topics)
        return Qrels({t: dict(v) for t, v in self.entries.items() if t in keep}, self.level)


def parse_qrels(path: str | Path, level: QrelsLevel | str = QrelsLevel.CONTENT) -> Qrels:
    """Parse 4-column ``topic 0 doc label`` qrels; positive labels become 1."""
    entries: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4 or parts[1] != "0":
                raise DataFormatError(f"{path}:{lineno}: expected 'topic_id 0 doc_id label', got {line.strip()!r}")
            topic, _, doc, raw = parts
            try:
                label = 1 if int(raw) > 0 else 0
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: label {raw!r} is not an integer") from None
            per_topic = entries.setdefault(topic, {})
            if doc in per_topic:
                raise DataFormatError(f"{path}:{lineno}: duplicate judgment for ({topic}, {doc})")
            per_topic[doc] = label
    return Qrels(entries, QrelsLevel(level))


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for topic in sorted(qrels.entries):
            for doc, label in qrels.entries[topic].items():
                fh.write(f"{topic} 0 {doc} {label}\n")


@dataclass
class EmbeddingTable:
    dim: int
    tokens: list[str]
    vectors: np.ndarray

    def __post_init__(self):
        if self.dim <= 0:
            raise DataFormatError("embedding dimension must be positive")
        self.vectors = np.asarray(self.vectors, dtype=np.float64).reshape(len(self.tokens), self.dim)
        self._row = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._row:
                raise DataFormatError(f"duplicate embedding token {tok!r}")
            self._row[tok] = i

    def __contains__(self, token: str) -> bool:
        return token in self._row

    def __len__(self) -> int:
        return len(self.tokens)

    def row(self, token: str) -> int | None:
        return self._row.get(token)

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self._row[token]]


def parse_embeddings(path: str | Path) -> EmbeddingTable:
    """Textual word-vector format: header ``<vocab_size> <dim>``, then one token per line."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataFormatError(f"{path}:1: expected '<vocab_size> <dim>' header")
        try:
            vocab_size, dim = int(header[0]), int(header[1])
        except ValueError:
            raise DataFormatError(f"{path}:1: non-integer header") from None
        if dim <= 0 or vocab_size < 0:
            raise DataFormatError(f"{path}:1: invalid header values")
        tokens: list[str] = []
        vectors = np.empty((vocab_size, dim))
        for lineno, line in enumerate(fh, 2):
            parts = line.rstrip("\n").rstrip().split(" ")
            if not parts or parts == [""]:
                continue
            if len(parts) - 1 != dim:
                raise DataFormatError(f"{path}:{lineno}: expected {dim} values, found {len(parts) - 1}")
            if len(tokens) >= vocab_size:
                raise DataFormatError(f"{path}:{lineno}: more vectors than the declared {vocab_size}")
            try:
                vectors[len(tokens)] = [float(v) for v in parts[1:]]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric vector component") from None
            tokens.append(parts[0])
    if len(tokens) != vocab_size:
        raise DataFormatError(f"{path}: header declares {vocab_size} vectors, found {len(tokens)}")
    return EmbeddingTable(dim, tokens, vectors)


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table.tokens)} {table.dim}\n")
        for tok, vec in zip(table.tokens, table.vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def write_run(ranking: RankedList, run_name: str, path: str | Path, append: bool = False) -> None:
    """Write ``topic Q0 doc rank score run`` lines; ranks start at 1."""
    prev = None
    for doc_id, score in ranking.items:
        if prev is not None and score > prev:
            raise DataFormatError(f"run for {ranking.topic_id}: scores increase at {doc_id!r}")
        prev = score
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for rank, (doc_id, score) in enumerate(ranking.items, 1):
            fh.write(f"{ranking.topic_id} Q0 {doc_id} {rank} {score!r} {run_name}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    """Read a 6-column run file, keeping the file's rank order per topic."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise DataFormatError(f"{path}:{lineno}: expected 6 columns, got {len(parts)}")
            topic, _, doc, rank, score, _ = parts
            try:
                rows.setdefault(topic, []).append((int(rank), doc, float(score)))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad rank or score") from None
    out = {}
    for topic, items in rows.items():
        items.sort(key=lambda r: r[0])
        pairs = tuple((d, s) for _, d, s in items)
        try:
            out[topic] = RankedList(topic, pairs)
        except ValueError:
            logger.warning("run %s topic %s: re-sorting ties by doc_id", path, topic)
            out[topic] = RankedList.from_scores(topic, pairs)
    return out
