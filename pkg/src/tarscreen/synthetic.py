"""Planted-relevance benchmark generator.

Every topic owns a disjoint vocabulary split into protocol-field words,
relevance words and generic topic words. Relevant documents come in two
flavours: *easy* ones repeat the title/objective vocabulary, *hard* ones
barely mention it but match the other protocol fields and the relevance
words. Near-miss irrelevant documents are heavy on title/objective words
and nothing else, so a pure query-likelihood ranking puts them above the
hard relevant documents. Word vectors cluster by topic and the relevance
words are shifted along a per-topic direction.
"""

from __future__ import annotations

import json
from importlib import resources
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import Document, write_corpus
from .dataio import (
    ADMITTED_FIELDS,
    EmbeddingTable,
    ProtocolField,
    Qrels,
    ReviewProtocol,
    ReviewType,
    write_embeddings,
    write_protocol,
    write_qrels,
)

_TYPES = (ReviewType.DTA, ReviewType.INTERVENTION, ReviewType.PROGNOSIS, ReviewType.QUALITATIVE)
_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SyntheticConfig:
    n_topics: int = 10
    docs_per_topic: int = 2000
    n_relevant: int = 20
    n_hard: int = 5
    n_near_miss: int = 200
    dim: int = 32
    words_per_field: int = 6
    relevance_words: int = 6
    topic_words: int = 60
    general_words: int = 300
    field_noise: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.n_hard > self.n_relevant:
            raise ValueError("n_hard cannot exceed n_relevant")
        if self.n_relevant + self.n_near_miss > self.docs_per_topic:
            raise ValueError("relevant plus near-miss documents exceed docs_per_topic")


FIXTURE_CONFIG = SyntheticConfig(
    n_topics=4, docs_per_topic=50, n_relevant=6, n_hard=2, n_near_miss=8,
    dim=16, topic_words=20, general_words=60, seed=7,
)


@dataclass
class Benchmark:
    config: SyntheticConfig
    documents: list[Document]
    protocols: dict[str, ReviewProtocol]
    qrels: Qrels
    word_embeddings: EmbeddingTable
    sent_embeddings: EmbeddingTable
    hard_relevant: dict[str, set[str]]


class _Words:
    """Unique pronounceable pseudo-words."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.seen: set[str] = set()

    def make(self) -> str:
        while True:
            n = int(self.rng.integers(2, 4))
            w = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS)) for _ in range(n))
            w += self.rng.choice(list(_CONSONANTS))
            if w not in self.seen:
                self.seen.add(w)
                return w

    def many(self, k: int) -> list[str]:
        return [self.make() for _ in range(k)]


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate(config: SyntheticConfig = SyntheticConfig()) -> Benchmark:
    rng = np.random.default_rng(config.seed)
    words = _Words(rng)
    general = words.many(config.general_words)
    zipf = 1.0 / np.arange(1, len(general) + 1) ** 1.1
    zipf /= zipf.sum()

    vocab_vec: dict[str, np.ndarray] = {}
    for w in general:
        vocab_vec[w] = rng.normal(scale=0.6, size=config.dim)

    docs: list[Document] = []
    protocols: dict[str, ReviewProtocol] = {}
    qrels: dict[str, dict[str, int]] = {}
    hard: dict[str, set[str]] = {}
    wpf = config.words_per_field

    for t in range(config.n_topics):
        topic_id = f"CD{t + 1:05d}"
        rtype = _TYPES[t % len(_TYPES)]
        centre = _unit(rng, config.dim) * 2.0
        rel_dir = _unit(rng, config.dim) * 2.5
        proto_words = {f: words.many(wpf) for f in ADMITTED_FIELDS[rtype]}
        title_obj = proto_words[ProtocolField.TITLE] + proto_words[ProtocolField.OBJECTIVES]
        other_fields = [w for f, ws in proto_words.items() if f not in (ProtocolField.TITLE, ProtocolField.OBJECTIVES) for w in ws]
        rel_words = words.many(config.relevance_words)
        topic_words = words.many(config.topic_words)
        for w in title_obj + other_fields + topic_words:
            vocab_vec[w] = centre + rng.normal(scale=0.8, size=config.dim)
        for w in rel_words:
            vocab_vec[w] = centre + rel_dir + rng.normal(scale=0.5, size=config.dim)

        fields = {}
        for f, ws in proto_words.items():
            fields[f] = " ".join(ws)
        protocols[topic_id] = ReviewProtocol(topic_id, rtype, fields)

        def pick(pool, k):
            return list(rng.choice(pool, size=k, replace=True)) if k > 0 else []

        def background(k):
            return list(rng.choice(general, size=k, p=zipf))

        n = config.docs_per_topic
        kinds = (["easy"] * (config.n_relevant - config.n_hard) + ["hard"] * config.n_hard
                 + ["near"] * config.n_near_miss + ["bg"] * (n - config.n_relevant - config.n_near_miss))
        order = rng.permutation(n)
        labels = {}
        hard[topic_id] = set()
        for i, j in enumerate(order):
            kind = kinds[j]
            doc_id = f"{topic_id}-{i:05d}"
            if kind == "easy":
                t_tok = pick(title_obj, 3) + pick(rel_words, 1) + background(3)
                a_tok = pick(title_obj, 6) + pick(other_fields, 3) + pick(rel_words, 3) + pick(topic_words, 8) + background(15)
            elif kind == "hard":
                t_tok = pick(other_fields, 2) + pick(rel_words, 1) + background(4)
                a_tok = pick(title_obj, 1) + pick(other_fields, 5) + pick(rel_words, 4) + pick(topic_words, 10) + background(15)
            elif kind == "near":
                t_tok = pick(title_obj, 3) + background(4)
                a_tok = pick(title_obj, 6) + pick(topic_words, 12) + background(15)
            else:
                t_tok = pick(title_obj, int(rng.integers(0, 2))) + pick(topic_words, 3) + background(4)
                extra = pick(other_fields, 1) if rng.random() < config.field_noise else []
                a_tok = pick(title_obj, int(rng.integers(1, 3))) + extra + pick(topic_words, 12) + background(20)
            rng.shuffle(t_tok)
            rng.shuffle(a_tok)
            docs.append(Document(doc_id, " ".join(t_tok).capitalize(), " ".join(a_tok).capitalize() + "."))
            labels[doc_id] = int(kind in ("easy", "hard"))
            if kind == "hard":
                hard[topic_id].add(doc_id)
        qrels[topic_id] = labels

    tokens = sorted(vocab_vec)
    w2v = np.vstack([vocab_vec[w] for w in tokens])
    s2v = w2v + rng.normal(scale=0.1, size=w2v.shape)
    return Benchmark(
        config,
        docs,
        protocols,
        Qrels(qrels),
        EmbeddingTable(config.dim, tokens, np.round(w2v, 6)),
        EmbeddingTable(config.dim, tokens, np.round(s2v, 6)),
        hard,
    )


DEFAULT_PIPELINE = {
    "corpus": "corpus.jsonl",
    "protocols": "protocols",
    "qrels": "qrels.txt",
    "word_embeddings": "w2v.txt",
    "sent_embeddings": "s2v.txt",
    "output_dir": "out",
    "seed": 42,
}


def write_benchmark(bench: Benchmark, directory: str | Path, pipeline: dict | None = None) -> dict[str, Path]:
    """Write corpus, protocols, qrels, both embedding tables and a pipeline config."""
    root = Path(directory)
    (root / "protocols").mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": root / "corpus.jsonl",
        "protocols": root / "protocols",
        "qrels": root / "qrels.txt",
        "word_embeddings": root / "w2v.txt",
        "sent_embeddings": root / "s2v.txt",
        "pipeline": root / "pipeline.json",
    }
    write_corpus(bench.documents, paths["corpus"])
    for topic_id, proto in bench.protocols.items():
        write_protocol(proto, root / "protocols" / f"{topic_id}.json")
    write_qrels(bench.qrels, paths["qrels"])
    write_embeddings(bench.word_embeddings, paths["word_embeddings"])
    write_embeddings(bench.sent_embeddings, paths["sent_embeddings"])
    paths["pipeline"].write_text(json.dumps({**DEFAULT_PIPELINE, **(pipeline or {})}, indent=2))
    (root / "synthetic.json").write_text(
        json.dumps({"config": asdict(bench.config), "hard_relevant": {t: sorted(v) for t, v in bench.hard_relevant.items()}}, indent=2)
    )
    return paths


def bundled_fixture() -> Path:
    """Directory of the 200-document fixture shipped with the package."""
    return Path(str(resources.files("tarscreen") / "data" / "fixture"))
