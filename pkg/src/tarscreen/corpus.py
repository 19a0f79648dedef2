"""Document corpus, frequency-filtered dictionary, inverted index and BM25."""

from __future__ import annotations

import io
import json
import logging
import math
import re
import struct
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

TITLE = "title"
ABSTRACT = "abstract"
TITLE_ABSTRACT = "title+abstract"
FIELDS = (TITLE, ABSTRACT, TITLE_ABSTRACT)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

_TOKEN_RE = re.compile(r"[^\W_]+")

INDEX_MAGIC = b"TARIDX\x00\x01"
INDEX_VERSION = 1


class CorpusError(ValueError):
    """Raised for invalid corpus content or index state."""


def tokenize(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs; everything else separates."""
    if not text:
        return []
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    abstract: str = ""

    def __post_init__(self):
        if not self.doc_id:
            raise CorpusError("document id must be non-empty")
        if not self.title or not self.title.strip():
            raise CorpusError(f"document {self.doc_id!r} has an empty title")

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract}" if self.abstract else self.title

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "title": self.title, "abstract": self.abstract}


def read_corpus(path: str | Path) -> list[Document]:
    """Read a JSON-lines corpus (keys doc_id, title, abstract)."""
    docs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(Document(str(obj["doc_id"]), obj["title"], obj.get("abstract") or ""))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed corpus line ({exc})") from exc
    return docs


def write_corpus(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class Dictionary:
    terms: frozenset[str]
    max_terms: int = 100_000
    max_doc_freq_ratio: float = 0.5
    min_count: int = 10

    def __contains__(self, term: str) -> bool:
        return term in self.terms

    def __len__(self) -> int:
        return len(self.terms)

    def filter(self, tokens: Iterable[str]) -> list[str]:
        return [t for t in tokens if t in self.terms]


def build_dictionary(
    corpus: Iterable[Document],
    max_terms: int = 100_000,
    max_doc_freq_ratio: float = 0.5,
    min_count: int = 10,
) -> Dictionary:
    """Keep the most frequent terms that pass the document-frequency and count filters.

    Statistics are folded over title and abstract together. Truncation to
    ``max_terms`` orders by descending corpus count, ties lexicographically.
    """
    counts: Counter[str] = Counter()
    dfs: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        tokens = tokenize(doc.title) + tokenize(doc.abstract)
        counts.update(tokens)
        dfs.update(set(tokens))
        n_docs += 1
    if n_docs == 0:
        raise CorpusError("cannot build a dictionary from an empty corpus: no statistics available")
    survivors = [
        t for t, c in counts.items() if c >= min_count and dfs[t] / n_docs <= max_doc_freq_ratio
    ]
    survivors.sort(key=lambda t: (-counts[t], t))
    terms = frozenset(survivors[:max_terms])
    logger.info("dictionary: %d of %d distinct tokens kept", len(terms), len(counts))
    return Dictionary(terms, max_terms, max_doc_freq_ratio, min_count)


@dataclass
class InvertedIndex:
    """Immutable per-field inverted index over a document collection.

    Postings are stored CSR-style: the postings of term ``i`` live in
    ``post_doc[term_ptr[i]:term_ptr[i+1]]`` with matching title/abstract
    term frequencies, sorted by document position.
    """

    documents: list[Document]
    dictionary: Dictionary
    terms: list[str]
    term_ptr: np.ndarray
    post_doc: np.ndarray
    post_tf_title: np.ndarray
    post_tf_abstract: np.ndarray
    title_len: np.ndarray
    abstract_len: np.ndarray
    _term_id: dict[str, int] = field(init=False, repr=False)
    _doc_pos: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self._term_id = {t: i for i, t in enumerate(self.terms)}
        self._doc_pos = {d.doc_id: i for i, d in enumerate(self.documents)}
        self.df = np.diff(self.term_ptr).astype(np.int64)

    @property
    def N(self) -> int:
        return len(self.documents)

    @property
    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]

    def field_lengths(self, fld: str) -> np.ndarray:
        if fld == TITLE:
            return self.title_len
        if fld == ABSTRACT:
            return self.abstract_len
        if fld == TITLE_ABSTRACT:
            return self.title_len + self.abstract_len
        raise CorpusError(f"unknown field {fld!r}; expected one of {FIELDS}")

    @property
    def field_avg_len(self) -> dict[str, float]:
        return {f: float(self.field_lengths(f).mean()) if self.N else 0.0 for f in FIELDS}

    @property
    def doc_lengths(self) -> dict[str, dict[str, int]]:
        return {
            d.doc_id: {TITLE: int(t), ABSTRACT: int(a), TITLE_ABSTRACT: int(t + a)}
            for d, t, a in zip(self.documents, self.title_len, self.abstract_len)
        }

    def term_id(self, term: str) -> int | None:
        return self._term_id.get(term)

    def doc_position(self, doc_id: str) -> int:
        try:
            return self._doc_pos[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id {doc_id!r}") from None

    def document(self, doc_id: str) -> Document:
        return self.documents[self.doc_position(doc_id)]

    def postings(self, term: str) -> list[tuple[str, int, int]]:
        """(doc_id, tf in title, tf in abstract) for every document containing ``term``."""
        tid = self._term_id.get(term)
        if tid is None:
            return []
        lo, hi = self.term_ptr[tid], self.term_ptr[tid + 1]
        return [
            (self.documents[d].doc_id, int(tt), int(ta))
            for d, tt, ta in zip(self.post_doc[lo:hi], self.post_tf_title[lo:hi], self.post_tf_abstract[lo:hi])
        ]

    def _field_tf(self, lo: int, hi: int, fld: str) -> np.ndarray:
        if fld == TITLE:
            return self.post_tf_title[lo:hi]
        if fld == ABSTRACT:
            return self.post_tf_abstract[lo:hi]
        return self.post_tf_title[lo:hi] + self.post_tf_abstract[lo:hi]

    def doc_freq(self, term: str) -> int:
        tid = self._term_id.get(term)
        return 0 if tid is None else int(self.df[tid])

    def idf(self, term: str) -> float:
        return _idf(self.N, self.doc_freq(term))

    def idf_array(self) -> np.ndarray:
        return np.log((self.N - self.df + 0.5) / (self.df + 0.5) + 1.0)

    def bm25(
        self,
        query_tokens: Sequence[str],
        doc_id: str,
        fld: str = TITLE_ABSTRACT,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> float:
        pos = self.doc_position(doc_id)
        dl = float(self.field_lengths(fld)[pos])
        avg = self.field_avg_len[fld]
        score = 0.0
        for term in query_tokens:
            tid = self._term_id.get(term)
            if tid is None:
                continue
            lo, hi = self.term_ptr[tid], self.term_ptr[tid + 1]
            j = np.searchsorted(self.post_doc[lo:hi], pos)
            if j >= hi - lo or self.post_doc[lo + j] != pos:
                continue
            tf = float(self._field_tf(lo + j, lo + j + 1, fld)[0])
            score += bm25_term(tf, dl, avg, int(self.df[tid]), self.N, k1, b)
        return score

    def bm25_all(
        self,
        query_tokens: Sequence[str],
        fld: str = TITLE_ABSTRACT,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
    ) -> np.ndarray:
        """BM25 of the query against every document, aligned with ``documents``."""
        lengths = self.field_lengths(fld).astype(np.float64)
        avg = self.field_avg_len[fld]
        norm = k1 * (1.0 - b + b * lengths / avg) if avg > 0 else np.full(self.N, k1 * (1.0 - b))
        scores = np.zeros(self.N)
        for term, qtf in Counter(query_tokens).items():
            tid = self._term_id.get(term)
            if tid is None:
                continue
            lo, hi = self.term_ptr[tid], self.term_ptr[tid + 1]
            docs = self.post_doc[lo:hi]
            tf = self._field_tf(lo, hi, fld).astype(np.float64)
            hit = tf > 0
            docs, tf = docs[hit], tf[hit]
            w = _idf(self.N, int(self.df[tid]))
            scores[docs] += qtf * w * tf * (k1 + 1.0) / (tf + norm[docs])
        return scores

    def tf_matrix(self, fld: str):
        """Sparse documents x terms count matrix for one field."""
        from scipy.sparse import csr_matrix

        rows = self.post_doc
        cols = np.repeat(np.arange(len(self.terms)), np.diff(self.term_ptr))
        data = self._field_tf(0, len(self.post_doc), fld).astype(np.float64)
        m = csr_matrix((data, (rows, cols)), shape=(self.N, len(self.terms)))
        m.eliminate_zeros()
        return m

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        meta = {
            "documents": [d.to_dict() for d in self.documents],
            "terms": self.terms,
            "dictionary": {
                "terms": sorted(self.dictionary.terms),
                "max_terms": self.dictionary.max_terms,
                "max_doc_freq_ratio": self.dictionary.max_doc_freq_ratio,
                "min_count": self.dictionary.min_count,
            },
        }
        buf = io.BytesIO()
        np.savez(
            buf,
            meta=np.frombuffer(json.dumps(meta, ensure_ascii=False).encode("utf-8"), dtype=np.uint8),
            term_ptr=self.term_ptr,
            post_doc=self.post_doc,
            post_tf_title=self.post_tf_title,
            post_tf_abstract=self.post_tf_abstract,
            title_len=self.title_len,
            abstract_len=self.abstract_len,
        )
        return INDEX_MAGIC + struct.pack("<I", INDEX_VERSION) + buf.getvalue()

    @classmethod
    def load(cls, path: str | Path) -> InvertedIndex:
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> InvertedIndex:
        if blob[: len(INDEX_MAGIC)] != INDEX_MAGIC:
            raise CorpusError("not an index file (bad magic header)")
        (version,) = struct.unpack_from("<I", blob, len(INDEX_MAGIC))
        if version != INDEX_VERSION:
            raise CorpusError(f"unsupported index version {version}")
        arrays = np.load(io.BytesIO(blob[len(INDEX_MAGIC) + 4 :]), allow_pickle=False)
        meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
        dmeta = meta["dictionary"]
        dictionary = Dictionary(
            frozenset(dmeta["terms"]), dmeta["max_terms"], dmeta["max_doc_freq_ratio"], dmeta["min_count"]
        )
        return cls(
            documents=[Document(**d) for d in meta["documents"]],
            dictionary=dictionary,
            terms=meta["terms"],
            term_ptr=arrays["term_ptr"],
            post_doc=arrays["post_doc"],
            post_tf_title=arrays["post_tf_title"],
            post_tf_abstract=arrays["post_tf_abstract"],
            title_len=arrays["title_len"],
            abstract_len=arrays["abstract_len"],
        )


def _idf(n_docs: int, df: int) -> float:
    return math.log((n_docs - df + 0.5) / (df + 0.5) + 1.0)


def bm25_term(tf: float, dl: float, avgdl: float, df: int, n_docs: int, k1: float, b: float) -> float:
    """Contribution of one query term; the +1 inside the log keeps idf positive."""
    if tf <= 0:
        return 0.0
    norm = k1 * (1.0 - b + b * dl / avgdl) if avgdl > 0 else k1 * (1.0 - b)
    return _idf(n_docs, df) * tf * (k1 + 1.0) / (tf + norm)


def build_index(corpus: Iterable[Document], dictionary: Dictionary) -> InvertedIndex:
    """Index title and abstract term frequencies of dictionary terms.

    Field lengths count every token, including those outside the dictionary.
    """
    documents: list[Document] = []
    seen: set[str] = set()
    per_term: dict[str, list[tuple[int, int, int]]] = {}
    title_len, abstract_len = [], []
    for pos, doc in enumerate(corpus):
        if doc.doc_id in seen:
            raise CorpusError(f"duplicate document id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        documents.append(doc)
        t_tokens, a_tokens = tokenize(doc.title), tokenize(doc.abstract)
        title_len.append(len(t_tokens))
        abstract_len.append(len(a_tokens))
        t_counts = Counter(t for t in t_tokens if t in dictionary.terms)
        a_counts = Counter(t for t in a_tokens if t in dictionary.terms)
        for term in t_counts.keys() | a_counts.keys():
            per_term.setdefault(term, []).append((pos, t_counts.get(term, 0), a_counts.get(term, 0)))

    terms = sorted(per_term)
    sizes = [len(per_term[t]) for t in terms]
    term_ptr = np.zeros(len(terms) + 1, dtype=np.int64)
    term_ptr[1:] = np.cumsum(sizes)
    flat = [p for t in terms for p in per_term[t]]
    post = np.array(flat, dtype=np.int32).reshape(-1, 3)
    return InvertedIndex(
        documents=documents,
        dictionary=dictionary,
        terms=terms,
        term_ptr=term_ptr,
        post_doc=post[:, 0].copy(),
        post_tf_title=post[:, 1].copy(),
        post_tf_abstract=post[:, 2].copy(),
        title_len=np.array(title_len, dtype=np.int32),
        abstract_len=np.array(abstract_len, dtype=np.int32),
    )
