"""Protocol/document feature vectors for the inter-review ranker.

The 72 columns are laid out as::

    1-18   BM25          9 protocol fields x (title, abstract)
    19-36  ln(1+BM25)    same pairs
    37-54  cos(tf-idf)   same pairs
    55-58  shared-token count     (Title, Objectives) x (title, abstract)
    59-62  ln(1+count)            same pairs
    63     BM25          Title+Objectives vs title+abstract
    64     z-score of 63 over the topic's candidate set
    65     unigram overlap |p & d| / |p|
    66     bigram overlap
    67     summed idf of shared index terms
    68-69  cos(SVD(tf-idf)) Title+Objectives vs title, vs abstract
    70-71  WMD Title, Objectives vs title+abstract
    72     cos(sentence embedding) Title+Objectives vs title+abstract

Pairs are ordered field-major: column ``1 + 2*f + d`` for protocol field
``f`` (in ``PROTOCOL_FIELDS`` order) and document field ``d`` (0 title,
1 abstract).
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .corpus import ABSTRACT, DEFAULT_B, DEFAULT_K1, TITLE, TITLE_ABSTRACT, Document, InvertedIndex, bm25_term, tokenize
from .dataio import ADMITTED_FIELDS, PROTOCOL_FIELDS, EmbeddingTable, ProtocolField, ReviewProtocol

logger = logging.getLogger(__name__)

N_FEATURES = 72
DEFAULT_SVD_RANK = 64
DEFAULT_WMD_MAX_TOKENS = 200

_DOC_FIELDS = (TITLE, ABSTRACT)
_TO_FIELDS = (ProtocolField.TITLE, ProtocolField.OBJECTIVES)


def _feature_names() -> list[str]:
    pairs = [f"{p.value}|{d}" for p in PROTOCOL_FIELDS for d in _DOC_FIELDS]
    to_pairs = [f"{p.value}|{d}" for p in _TO_FIELDS for d in _DOC_FIELDS]
    names = [f"bm25[{p}]" for p in pairs]
    names += [f"log_bm25[{p}]" for p in pairs]
    names += [f"cos_tfidf[{p}]" for p in pairs]
    names += [f"shared_count[{p}]" for p in to_pairs]
    names += [f"log_shared_count[{p}]" for p in to_pairs]
    names += [
        "bm25[Title+Objectives|title+abstract]",
        "zscore_bm25[Title+Objectives|title+abstract]",
        "unigram_overlap[Title+Objectives|title+abstract]",
        "bigram_overlap[Title+Objectives|title+abstract]",
        "shared_idf[Title+Objectives|title+abstract]",
        "cos_svd_tfidf[Title+Objectives|title]",
        "cos_svd_tfidf[Title+Objectives|abstract]",
        "wmd[Title|title+abstract]",
        "wmd[Objectives|title+abstract]",
        "cos_sentence[Title+Objectives|title+abstract]",
    ]
    return names


FEATURE_NAMES: list[str] = _feature_names()
assert len(FEATURE_NAMES) == N_FEATURES

# 0-based column offsets
BM25_COLS = slice(0, 18)
LOG_BM25_COLS = slice(18, 36)
COS_TFIDF_COLS = slice(36, 54)
COUNT_COLS = slice(54, 58)
LOG_COUNT_COLS = slice(58, 62)
BM25_TO = 62
ZSCORE_TO = 63
UNIGRAM_OVERLAP = 64
BIGRAM_OVERLAP = 65
SHARED_IDF = 66
SVD_TITLE, SVD_ABSTRACT = 67, 68
WMD_TITLE, WMD_OBJECTIVES = 69, 70
COS_SENTENCE = 71


class FeatureError(RuntimeError):
    pass


class WmdUndefined(ValueError):
    """A side of the distance has no in-vocabulary tokens."""


def cosine(u, v) -> float:
    u = u.toarray().ravel() if sp.issparse(u) else np.asarray(u, dtype=np.float64).ravel()
    v = v.toarray().ravel() if sp.issparse(v) else np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape[0]} vs {v.shape[0]}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def zscore(scores: Sequence[float]) -> np.ndarray:
    """Population z-scores; a constant list maps to zeros."""
    x = np.asarray(scores, dtype=np.float64)
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(x)
    return (x - x.mean()) / std


@dataclass
class TfIdfVectorizer:
    """Raw term counts times the index idf, over the index vocabulary."""

    vocabulary: dict[str, int]
    idf_weights: np.ndarray

    @classmethod
    def from_index(cls, index: InvertedIndex) -> TfIdfVectorizer:
        return cls({t: i for i, t in enumerate(index.terms)}, index.idf_array())

    @property
    def dim(self) -> int:
        return len(self.vocabulary)

    def transform_tokens(self, tokens: Sequence[str]) -> sp.csr_matrix:
        counts = Counter(t for t in tokens if t in self.vocabulary)
        cols = np.fromiter((self.vocabulary[t] for t in counts), dtype=np.int64, count=len(counts))
        vals = np.fromiter(counts.values(), dtype=np.float64, count=len(counts)) * self.idf_weights[cols]
        order = np.argsort(cols)
        return sp.csr_matrix((vals[order], cols[order], [0, len(cols)]), shape=(1, self.dim))


def tfidf_vector(text: str, vectorizer: TfIdfVectorizer) -> sp.csr_matrix:
    return vectorizer.transform_tokens(tokenize(text))


@dataclass
class SvdProjector:
    """Projection onto the top right singular directions (rows of ``components``)."""

    components: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    def project(self, x) -> np.ndarray:
        if sp.issparse(x):
            return np.asarray(x @ self.components.T)
        return np.asarray(x, dtype=np.float64) @ self.components.T

    def reconstruct(self, projected: np.ndarray) -> np.ndarray:
        return np.asarray(projected) @ self.components


def fit_svd(matrix, rank: int, seed: int = 0) -> SvdProjector:
    """Truncated SVD of a (documents x terms) matrix; deterministic signs."""
    n_rows, n_cols = matrix.shape
    if rank < 1 or rank > min(n_rows, n_cols):
        raise ValueError(f"rank {rank} is outside [1, {min(n_rows, n_cols)}] for a {n_rows}x{n_cols} matrix")
    small = min(n_rows, n_cols)
    if sp.issparse(matrix) and rank < small - 1 and small > 500:
        from scipy.sparse.linalg import svds

        v0 = np.random.default_rng(seed).uniform(-1, 1, size=small)
        _, s, vt = svds(matrix.astype(np.float64), k=rank, v0=v0)
        order = np.argsort(-s)
        s, vt = s[order], vt[order]
    else:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
        _, s, vt = np.linalg.svd(dense, full_matrices=False)
        s, vt = s[:rank], vt[:rank]
    pivots = np.argmax(np.abs(vt), axis=1)
    signs = np.sign(vt[np.arange(len(vt)), pivots])
    signs[signs == 0] = 1.0
    return SvdProjector(vt * signs[:, None], s)


@lru_cache(maxsize=1)
def _emd2():
    # keep the optimal-transport package from probing heavyweight array backends
    for key in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{key}", "1")
    from ot import emd2

    return emd2


def _bag(tokens: Sequence[str], embeddings: EmbeddingTable, max_distinct: int) -> tuple[np.ndarray, np.ndarray]:
    counts = Counter(t for t in tokens if t in embeddings)
    if not counts:
        return np.empty(0, dtype=np.int64), np.empty(0)
    kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_distinct]
    kept.sort(key=lambda kv: kv[0])
    rows = np.array([embeddings.row(t) for t, _ in kept], dtype=np.int64)
    weights = np.array([c for _, c in kept], dtype=np.float64)
    return rows, weights / weights.sum()


def _transport_cost(rows_a, w_a, rows_b, w_b, embeddings: EmbeddingTable) -> float:
    cost = cdist(embeddings.vectors[rows_a], embeddings.vectors[rows_b])
    if len(rows_a) == 1 or len(rows_b) == 1:
        # a single source or sink admits exactly one feasible plan
        return float((w_a[:, None] * w_b[None, :] * cost).sum())
    return max(float(_emd2()(w_a, w_b, cost)), 0.0)


def word_movers_distance(
    tokens_a: Sequence[str],
    tokens_b: Sequence[str],
    embeddings: EmbeddingTable,
    max_distinct: int = DEFAULT_WMD_MAX_TOKENS,
) -> float:
    """Exact earth mover's distance between normalized bags of word vectors.

    Out-of-vocabulary tokens are dropped; at most ``max_distinct`` of the most
    frequent distinct tokens are kept per side.
    """
    rows_a, w_a = _bag(tokens_a, embeddings, max_distinct)
    rows_b, w_b = _bag(tokens_b, embeddings, max_distinct)
    if not len(rows_a) or not len(rows_b):
        raise WmdUndefined("word mover's distance is undefined: a side has no in-vocabulary tokens")
    if np.array_equal(rows_a, rows_b) and np.array_equal(w_a, w_b):
        return 0.0
    return _transport_cost(rows_a, w_a, rows_b, w_b, embeddings)


def sentence_embed(text_or_tokens, embeddings: EmbeddingTable) -> np.ndarray:
    tokens = tokenize(text_or_tokens) if isinstance(text_or_tokens, str) else text_or_tokens
    rows = [r for r in (embeddings.row(t) for t in tokens) if r is not None]
    if not rows:
        return np.zeros(embeddings.dim)
    return embeddings.vectors[rows].mean(axis=0)


@dataclass
class FeatureContext:
    """Corpus-level artifacts shared by every (protocol, document) pair."""

    index: InvertedIndex
    vectorizer: TfIdfVectorizer | None = None
    svd: SvdProjector | None = None
    word_embeddings: EmbeddingTable | None = None
    sent_embeddings: EmbeddingTable | None = None
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    wmd_max_tokens: int = DEFAULT_WMD_MAX_TOKENS
    _doc_tfidf: dict = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def fit(
        cls,
        index: InvertedIndex,
        word_embeddings: EmbeddingTable,
        sent_embeddings: EmbeddingTable | None = None,
        svd_rank: int = DEFAULT_SVD_RANK,
        k1: float = DEFAULT_K1,
        b: float = DEFAULT_B,
        wmd_max_tokens: int = DEFAULT_WMD_MAX_TOKENS,
        seed: int = 0,
    ) -> FeatureContext:
        vectorizer = TfIdfVectorizer.from_index(index)
        ctx = cls(index, vectorizer, None, word_embeddings, sent_embeddings or word_embeddings, k1, b, wmd_max_tokens)
        both = ctx.doc_tfidf(TITLE_ABSTRACT)
        rank = min(svd_rank, *both.shape)
        if rank < svd_rank:
            logger.warning("SVD rank reduced from %d to %d to fit a %dx%d matrix", svd_rank, rank, *both.shape)
        ctx.svd = fit_svd(both, rank, seed=seed)
        return ctx

    def check_fitted(self) -> None:
        for name in ("vectorizer", "svd", "word_embeddings", "sent_embeddings"):
            if getattr(self, name) is None:
                raise FeatureError(f"feature context artifact {name!r} is not fitted")

    def doc_tfidf(self, fld: str) -> sp.csr_matrix:
        if fld not in self._doc_tfidf:
            m = self.index.tf_matrix(fld) @ sp.diags(self.vectorizer.idf_weights)
            self._doc_tfidf[fld] = sp.csr_matrix(m)
        return self._doc_tfidf[fld]


@dataclass
class _ProtocolView:
    """Per-protocol quantities computed once and reused for every document."""

    protocol: ReviewProtocol
    present: list[bool]
    tokens: list[list[str]]
    tfidf: list[np.ndarray]
    to_tokens: list[str]
    to_set: set[str]
    to_bigrams: set[tuple[str, str]]
    to_svd: np.ndarray
    to_sent: np.ndarray
    field_sets: tuple[set[str], set[str]]
    wmd_bags: tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]

    @classmethod
    def build(cls, protocol: ReviewProtocol, ctx: FeatureContext) -> _ProtocolView:
        ctx.check_fitted()
        admitted = ADMITTED_FIELDS[protocol.review_type]
        present = [f in admitted for f in PROTOCOL_FIELDS]
        tokens = [tokenize(protocol.get(f)) if ok else [] for f, ok in zip(PROTOCOL_FIELDS, present)]
        tfidf = [ctx.vectorizer.transform_tokens(t).toarray().ravel() for t in tokens]
        to_tokens = tokens[0] + tokens[1]
        to_vec = ctx.vectorizer.transform_tokens(to_tokens)
        return cls(
            protocol=protocol,
            present=present,
            tokens=tokens,
            tfidf=tfidf,
            to_tokens=to_tokens,
            to_set=set(to_tokens),
            to_bigrams=set(zip(to_tokens, to_tokens[1:])),
            to_svd=ctx.svd.project(to_vec).ravel(),
            to_sent=sentence_embed(to_tokens, ctx.sent_embeddings),
            field_sets=(set(tokens[0]), set(tokens[1])),
            wmd_bags=(
                _bag(tokens[0], ctx.word_embeddings, ctx.wmd_max_tokens),
                _bag(tokens[1], ctx.word_embeddings, ctx.wmd_max_tokens),
            ),
        )


def _token_features(view: _ProtocolView, t_tokens: list[str], a_tokens: list[str], ctx: FeatureContext, out: np.ndarray) -> tuple[bool, bool]:
    """Fill the token-set, embedding and WMD columns of one row in place."""
    t_counts, a_counts = Counter(t_tokens), Counter(a_tokens)
    for i, pset in enumerate(view.field_sets):
        out[COUNT_COLS.start + 2 * i] = sum(t_counts[t] for t in pset)
        out[COUNT_COLS.start + 2 * i + 1] = sum(a_counts[t] for t in pset)
    out[LOG_COUNT_COLS] = np.log1p(out[COUNT_COLS])

    d_tokens = t_tokens + a_tokens
    d_set = set(d_tokens)
    shared = view.to_set & d_set
    out[UNIGRAM_OVERLAP] = len(shared) / len(view.to_set) if view.to_set else 0.0
    d_bigrams = set(zip(d_tokens, d_tokens[1:]))
    out[BIGRAM_OVERLAP] = len(view.to_bigrams & d_bigrams) / len(view.to_bigrams) if view.to_bigrams else 0.0
    # sorted so the float sum does not depend on the process's string hash seed
    out[SHARED_IDF] = sum(ctx.index.idf(t) for t in sorted(shared) if ctx.index.term_id(t) is not None)

    undefined = [False, False]
    rows_d, w_d = _bag(d_tokens, ctx.word_embeddings, ctx.wmd_max_tokens)
    for i, (rows_p, w_p) in enumerate(view.wmd_bags):
        if not len(rows_p) or not len(rows_d):
            out[WMD_TITLE + i] = 0.0
            undefined[i] = True
        elif np.array_equal(rows_p, rows_d) and np.array_equal(w_p, w_d):
            out[WMD_TITLE + i] = 0.0
        else:
            out[WMD_TITLE + i] = _transport_cost(rows_p, w_p, rows_d, w_d, ctx.word_embeddings)
    out[COS_SENTENCE] = cosine(view.to_sent, sentence_embed(d_tokens, ctx.sent_embeddings))
    return undefined[0], undefined[1]


def _bm25_text(query: Sequence[str], tokens: list[str], fld: str, ctx: FeatureContext) -> float:
    index = ctx.index
    counts = Counter(tokens)
    avg = index.field_avg_len[fld]
    score = 0.0
    for term in query:
        tf = counts.get(term, 0)
        if tf and index.term_id(term) is not None:
            score += bm25_term(tf, len(tokens), avg, index.doc_freq(term), index.N, ctx.k1, ctx.b)
    return score


def extract_features(
    protocol: ReviewProtocol,
    doc: Document,
    context: FeatureContext,
    candidate_bm25_stats: tuple[float, float] | None = None,
    _view: _ProtocolView | None = None,
) -> np.ndarray:
    """Feature vector of one (protocol, document) pair, computed from the document text.

    ``candidate_bm25_stats`` is the (mean, population stdev) of column 63
    over the topic's candidate set; without it column 64 is 0.
    """
    view = _view or _ProtocolView.build(protocol, context)
    out = np.zeros(N_FEATURES)
    t_tok, a_tok = tokenize(doc.title), tokenize(doc.abstract)
    for f in range(len(PROTOCOL_FIELDS)):
        if not view.present[f]:
            continue
        for d, (fld, toks) in enumerate(((TITLE, t_tok), (ABSTRACT, a_tok))):
            col = 2 * f + d
            out[BM25_COLS.start + col] = _bm25_text(view.tokens[f], toks, fld, context)
            doc_vec = context.vectorizer.transform_tokens(toks).toarray().ravel()
            out[COS_TFIDF_COLS.start + col] = cosine(view.tfidf[f], doc_vec)
    out[LOG_BM25_COLS] = np.log1p(out[BM25_COLS])
    out[BM25_TO] = _bm25_text(view.to_tokens, t_tok + a_tok, TITLE_ABSTRACT, context)
    if candidate_bm25_stats is not None:
        mean, std = candidate_bm25_stats
        out[ZSCORE_TO] = (out[BM25_TO] - mean) / std if std > 0 else 0.0
    for col, toks in ((SVD_TITLE, t_tok), (SVD_ABSTRACT, a_tok)):
        out[col] = cosine(view.to_svd, context.svd.project(context.vectorizer.transform_tokens(toks)).ravel())
    _token_features(view, t_tok, a_tok, context, out)
    return out


@dataclass
class FeatureMatrix:
    topic_id: str
    review_type: str
    doc_ids: list[str]
    values: np.ndarray
    wmd_undefined: np.ndarray

    def __post_init__(self):
        if self.values.shape != (len(self.doc_ids), N_FEATURES):
            raise FeatureError(f"feature matrix shape {self.values.shape} does not match {len(self.doc_ids)} docs")

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        if stem.suffix in (".npy", ".json"):
            stem = stem.with_suffix("")
        stem.parent.mkdir(parents=True, exist_ok=True)
        npy, side = stem.with_suffix(".npy"), stem.with_suffix(".json")
        np.save(npy, np.asfortranarray(self.values))
        side.write_text(json.dumps({
            "format": "tarscreen-features",
            "version": 1,
            "topic_id": self.topic_id,
            "review_type": self.review_type,
            "feature_names": FEATURE_NAMES,
            "doc_ids": self.doc_ids,
            "wmd_undefined": np.argwhere(self.wmd_undefined).tolist(),
            "matrix": npy.name,
        }))
        return npy, side

    @classmethod
    def load(cls, path: str | Path) -> FeatureMatrix:
        path = Path(path)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text())
        if meta.get("feature_names") != FEATURE_NAMES:
            raise FeatureError(f"{side}: feature names do not match this build's 72-feature layout")
        values = np.load(side.parent / meta["matrix"])
        undefined = np.zeros((len(meta["doc_ids"]), 2), dtype=bool)
        for i, j in meta["wmd_undefined"]:
            undefined[i, j] = True
        return cls(meta["topic_id"], meta["review_type"], meta["doc_ids"], np.ascontiguousarray(values), undefined)


def extract_topic_features(protocol: ReviewProtocol, doc_ids: Sequence[str], context: FeatureContext) -> FeatureMatrix:
    """Features for every candidate of a topic, then the topic-level z-score pass.

    BM25, tf-idf and SVD columns are computed in bulk from the index; the
    results equal :func:`extract_features` on each document.
    """
    view = _ProtocolView.build(protocol, context)
    index = context.index
    pos = np.array([index.doc_position(d) for d in doc_ids], dtype=np.int64)
    n = len(pos)
    values = np.zeros((n, N_FEATURES))
    tfidf_docs = [context.doc_tfidf(TITLE)[pos], context.doc_tfidf(ABSTRACT)[pos]]
    doc_norms = [np.sqrt(np.asarray(m.multiply(m).sum(axis=1)).ravel()) for m in tfidf_docs]
    for f in range(len(PROTOCOL_FIELDS)):
        if not view.present[f]:
            continue
        qnorm = np.linalg.norm(view.tfidf[f])
        for d, fld in enumerate(_DOC_FIELDS):
            col = 2 * f + d
            if view.tokens[f]:
                values[:, BM25_COLS.start + col] = index.bm25_all(view.tokens[f], fld, context.k1, context.b)[pos]
            if qnorm > 0:
                denom = doc_norms[d] * qnorm
                dots = tfidf_docs[d] @ view.tfidf[f]
                values[:, COS_TFIDF_COLS.start + col] = np.clip(
                    np.divide(dots, denom, out=np.zeros(n), where=denom > 0), -1.0, 1.0
                )
    values[:, LOG_BM25_COLS] = np.log1p(values[:, BM25_COLS])
    values[:, BM25_TO] = index.bm25_all(view.to_tokens, TITLE_ABSTRACT, context.k1, context.b)[pos]
    values[:, ZSCORE_TO] = zscore(values[:, BM25_TO]) if n else []

    qn = np.linalg.norm(view.to_svd)
    for col, m in ((SVD_TITLE, tfidf_docs[0]), (SVD_ABSTRACT, tfidf_docs[1])):
        proj = context.svd.project(m)
        norms = np.linalg.norm(proj, axis=1) * qn
        values[:, col] = np.clip(np.divide(proj @ view.to_svd, norms, out=np.zeros(n), where=norms > 0), -1.0, 1.0)

    undefined = np.zeros((n, 2), dtype=bool)
    for i, p in enumerate(pos):
        doc = index.documents[p]
        undefined[i] = _token_features(view, tokenize(doc.title), tokenize(doc.abstract), context, values[i])
    if undefined.any():
        logger.info("topic %s: WMD undefined for %d feature cells (set to 0)", protocol.topic_id, int(undefined.sum()))
    return FeatureMatrix(protocol.topic_id, protocol.review_type.value, list(doc_ids), values, undefined)


def candidate_bm25_stats(matrix: FeatureMatrix) -> tuple[float, float]:
    col = matrix.values[:, BM25_TO]
    return float(col.mean()), float(col.std())


__all__ = [
    "FEATURE_NAMES",
    "N_FEATURES",
    "FeatureContext",
    "FeatureError",
    "FeatureMatrix",
    "SvdProjector",
    "TfIdfVectorizer",
    "WmdUndefined",
    "candidate_bm25_stats",
    "cosine",
    "extract_features",
    "extract_topic_features",
    "fit_svd",
    "sentence_embed",
    "tfidf_vector",
    "word_movers_distance",
    "zscore",
]
