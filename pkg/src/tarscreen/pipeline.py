"""End-to-end orchestration: retrieve, extract features, inter-review rank, intra-review feedback, evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import os
import sys
import time
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baselines import DEFAULT_NEGATIVES, protocol_seed_vector, run_autotar
from .corpus import DEFAULT_B, DEFAULT_K1, TITLE_ABSTRACT, InvertedIndex, build_dictionary, build_index, read_corpus
from .dataio import Qrels, ReviewProtocol, ReviewType, load_protocols, parse_embeddings, parse_qrels, write_run
from .evaluation import (
    DEFAULT_THRESHOLDS,
    ComparisonTable,
    MetricsReport,
    compare,
    curve_csv,
    evaluate_run,
    macro_curve,
    recall_curve,
)
from .features import DEFAULT_SVD_RANK, DEFAULT_WMD_MAX_TOKENS, FeatureContext, FeatureMatrix, extract_topic_features
from .feedback import DEFAULT_C, FeedbackParams, OracleReviewer, document_vectors, simulate, write_trace
from .ltr import LtrModel, LtrParams, LtrTrainingSet, score, train
from .ranking import RankedList
from .retrieval import DEFAULT_K, primary_retrieve

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

STAGES = ("initial", "inter", "intra")


class PipelineError(RuntimeError):
    pass


class LeakageError(PipelineError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    protocols: Path
    qrels: Path
    word_embeddings: Path
    output_dir: Path
    corpus: Path | None = None
    index: Path | None = None
    sent_embeddings: Path | None = None
    cache_dir: Path | None = None
    topics: list[str] | None = None
    mode: str = "leave_one_out"
    train_topics: list[str] | None = None
    model: Path | None = None
    dictionary: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)
    ltr: dict = field(default_factory=dict)
    feedback: dict = field(default_factory=dict)
    representation: str = "sent2vec"
    C: float = DEFAULT_C
    autotar: dict = field(default_factory=lambda: {"enabled": True})
    thresholds: tuple[int, ...] = DEFAULT_THRESHOLDS
    curve_depth: int = 200
    seed: int = 42
    workers: int = 1

    _PATHS = ("protocols", "qrels", "word_embeddings", "output_dir", "corpus", "index", "sent_embeddings", "cache_dir", "model")

    @classmethod
    def from_dict(cls, obj: Mapping, base_dir: str | Path = ".") -> PipelineConfig:
        """Build from a mapping; relative paths resolve against ``base_dir``."""
        base = Path(base_dir)
        known = set(cls.__dataclass_fields__) - {"_PATHS"}
        unknown = set(obj) - known
        if unknown:
            raise PipelineError(f"unknown configuration keys: {sorted(unknown)}")
        for key in ("protocols", "qrels", "word_embeddings", "output_dir"):
            if key not in obj:
                raise PipelineError(f"configuration is missing {key!r}")
        kw = dict(obj)
        for key in cls._PATHS:
            if kw.get(key) is not None:
                p = Path(kw[key])
                kw[key] = p if p.is_absolute() else base / p
        if kw.get("corpus") is None and kw.get("index") is None:
            raise PipelineError("configuration needs a 'corpus' or an 'index'")
        if "thresholds" in kw:
            kw["thresholds"] = tuple(int(t) for t in kw["thresholds"])
        if kw.get("mode", "leave_one_out") not in ("leave_one_out", "train_test", "pretrained"):
            raise PipelineError(f"unknown mode {kw['mode']!r}")
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        return cls.from_dict(read_config(path), Path(path).parent)

    @property
    def feedback_params(self) -> FeedbackParams:
        return FeedbackParams(**self.feedback)

    @property
    def ltr_params(self) -> LtrParams:
        return LtrParams.from_dict({"seed": self.seed, **self.ltr})


def read_config(path: str | Path) -> dict:
    """Parse a JSON or TOML (by ``.toml`` suffix) configuration file."""
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"configuration file not found: {path}")
    raw = path.read_bytes()
    try:
        return tomllib.loads(raw.decode()) if path.suffix == ".toml" else json.loads(raw)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise PipelineError(f"{path}: cannot parse configuration ({exc})") from exc


# ---------------------------------------------------------------------------
# hashing and caching


def _sha(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (bytes, bytearray)):
            h.update(p)
        else:
            h.update(json.dumps(p, sort_keys=True, default=str).encode())
        h.update(b"\x00")
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path | None, what: str) -> Path:
    if path is None or not Path(path).exists():
        raise PipelineError(f"missing artifact: {what} ({path})")
    return Path(path)


def load_or_build_index(cfg: PipelineConfig, cache_dir: Path) -> tuple[InvertedIndex, Path]:
    if cfg.index is not None:
        return InvertedIndex.load(_require(cfg.index, "index")), Path(cfg.index)
    corpus = _require(cfg.corpus, "corpus")
    d = {"max_terms": 100_000, "max_doc_freq_ratio": 0.5, "min_count": 10, **cfg.dictionary}
    key = _sha(file_hash(corpus), d)[:16]
    path = cache_dir / f"index-{key}.bin"
    if path.exists():
        logger.info("index cache hit %s", path.name)
        return InvertedIndex.load(path), path
    docs = read_corpus(corpus)
    index = build_index(docs, build_dictionary(docs, **d))
    cache_dir.mkdir(parents=True, exist_ok=True)
    index.save(path)
    return index, path


# ---------------------------------------------------------------------------
# leave-one-out with leakage audit


@dataclass
class AuditEntry:
    held_out: str
    training_topics: list[str]
    n_training_rows: int
    training_digest: str

    def to_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class LeaveOneOutResult:
    models: dict[str, LtrModel]
    rankings: dict[str, RankedList]
    audit: list[AuditEntry]
    report: MetricsReport | None = None


def audit_training_set(held_out: str, training: LtrTrainingSet) -> AuditEntry:
    """Record what entered training and fail if the held-out topic is among it."""
    topics = training.topic_ids
    if held_out in topics:
        raise LeakageError(f"qrels of held-out topic {held_out} entered LTR training")
    digest = _sha([(g.topic_id, g.doc_ids, g.labels.tolist()) for g in training.groups])
    return AuditEntry(held_out, sorted(topics), sum(len(g.labels) for g in training.groups), digest)


def leave_one_out(
    matrices: Mapping[str, FeatureMatrix],
    qrels: Qrels,
    params: LtrParams | None = None,
    thresholds: Sequence[int] = DEFAULT_THRESHOLDS,
    train_fn: Callable[[LtrTrainingSet, LtrParams | None], LtrModel] = train,
) -> LeaveOneOutResult:
    """Train one model per topic on all the other topics and rank the held-out one."""
    if len(matrices) < 2:
        raise PipelineError("leave-one-out needs at least two topics")
    topics = sorted(matrices)
    models, rankings, audit = {}, {}, []
    for held in topics:
        # qrels restricted to the training topics, so held-out labels are unreachable
        train_qrels = qrels.restrict(t for t in topics if t != held)
        training = LtrTrainingSet.build([matrices[t] for t in topics if t != held], train_qrels)
        audit.append(audit_training_set(held, training))
        model = train_fn(training, params)
        model.training_topics = list(training.topic_ids)
        models[held] = model
        rankings[held] = score(model, matrices[held])
        logger.info("leave-one-out: ranked %s with a model over %d topics", held, len(training.groups))
    report = evaluate_run(rankings, qrels, thresholds, name="inter")
    return LeaveOneOutResult(models, rankings, audit, report)


# ---------------------------------------------------------------------------
# per-topic work (picklable for process pools)

_SHARED: dict = {}


def _extract_job(args):
    topic_id, doc_ids = args
    ctx = _SHARED["ctx"]
    return topic_id, extract_topic_features(_SHARED["protocols"][topic_id], doc_ids, ctx)


def _simulate_job(args):
    topic_id, candidates, vectors, relevant, seed_vector = args
    cfg: PipelineConfig = _SHARED["cfg"]
    hybrid = simulate(candidates, vectors, OracleReviewer(relevant), cfg.feedback_params, seed=cfg.seed, C=cfg.C)
    at = None
    if cfg.autotar.get("enabled", True) and seed_vector is not None:
        budget = cfg.autotar.get("budget")
        budget = len(candidates) if budget is None else min(int(budget), len(candidates))
        at = run_autotar(candidates, seed_vector, vectors, OracleReviewer(relevant), budget=budget, seed=cfg.seed,
                         n_negatives=cfg.autotar.get("n_negatives", DEFAULT_NEGATIVES), C=cfg.C)
    return topic_id, hybrid, at


def _map(fn, items: list, workers: int, shared: dict) -> list:
    _SHARED.clear()
    _SHARED.update(shared)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# full run


@dataclass
class PipelineResult:
    runs: dict[str, dict[str, RankedList]]
    reports: dict[str, MetricsReport]
    comparison: ComparisonTable
    audit: list[AuditEntry]
    traces: dict[str, dict[str, list]]
    by_type: dict[str, dict[str, dict]]
    output_dir: Path
    timings: dict[str, float] = field(default_factory=dict)


def _feature_cache_key(index_key: str, protocol: ReviewProtocol, doc_ids: list[str], emb_keys: tuple, fparams: dict) -> str:
    return _sha(index_key, protocol.to_dict(), doc_ids, emb_keys, fparams)[:24]


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    out = Path(cfg.output_dir)
    cache = Path(cfg.cache_dir) if cfg.cache_dir else out / "cache"
    out.mkdir(parents=True, exist_ok=True)

    protocols = load_protocols(_require(cfg.protocols, "protocols directory"))
    qrels = parse_qrels(_require(cfg.qrels, "qrels"))
    w2v_path = _require(cfg.word_embeddings, "word embeddings")
    s2v_path = _require(cfg.sent_embeddings, "sentence embeddings") if cfg.sent_embeddings else w2v_path
    w2v = parse_embeddings(w2v_path)
    s2v = parse_embeddings(s2v_path) if s2v_path != w2v_path else w2v
    topics = sorted(cfg.topics or protocols)
    for t in topics:
        if t not in protocols:
            raise PipelineError(f"missing artifact: protocol for topic {t}")
    if cfg.mode == "leave_one_out" and len(topics) < 2:
        raise PipelineError("leave-one-out needs at least two topics")

    index, index_path = load_or_build_index(cfg, cache)
    index_key = file_hash(index_path)
    timings["index"] = time.perf_counter() - t0

    # stage 1
    rparams = {"k": DEFAULT_K, "fusion": "score", "field": TITLE_ABSTRACT, "k1": DEFAULT_K1, "b": DEFAULT_B, **cfg.retrieval}
    train_only = [t for t in (cfg.train_topics or []) if t not in topics]
    all_topics = topics + train_only
    for t in train_only:
        if t not in protocols:
            raise PipelineError(f"missing artifact: protocol for training topic {t}")
    initial = {t: primary_retrieve(protocols[t], index, **rparams) for t in all_topics}
    timings["retrieval"] = time.perf_counter() - t0

    # features, cached by content hash
    fparams = {"svd_rank": DEFAULT_SVD_RANK, "wmd_max_tokens": DEFAULT_WMD_MAX_TOKENS, **cfg.features}
    emb_keys = (file_hash(w2v_path), file_hash(s2v_path))
    fdir = cache / "features"
    matrices: dict[str, FeatureMatrix] = {}
    todo = []
    for t in all_topics:
        key = _feature_cache_key(index_key, protocols[t], initial[t].doc_ids, emb_keys, {**fparams, "seed": cfg.seed})
        path = fdir / f"{t}-{key}.json"
        if path.exists():
            matrices[t] = FeatureMatrix.load(path)
        else:
            todo.append((t, key))
    if todo:
        ctx = FeatureContext.fit(index, w2v, s2v, svd_rank=fparams["svd_rank"], k1=rparams["k1"], b=rparams["b"],
                                 wmd_max_tokens=fparams["wmd_max_tokens"], seed=cfg.seed)
        jobs = [(t, initial[t].doc_ids) for t, _ in todo]
        for (t, mat), (_, key) in zip(_map(_extract_job, jobs, cfg.workers, {"ctx": ctx, "protocols": protocols}), todo):
            mat.save(fdir / f"{t}-{key}")
            matrices[t] = mat
    logger.info("features: %d cached, %d extracted", len(all_topics) - len(todo), len(todo))
    timings["features"] = time.perf_counter() - t0

    # stage 2
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    audit: list[AuditEntry] = []
    if cfg.mode == "leave_one_out":
        loo = leave_one_out({t: matrices[t] for t in topics}, qrels, cfg.ltr_params, cfg.thresholds)
        inter, audit = loo.rankings, loo.audit
        for t, m in loo.models.items():
            m.save(models_dir / f"{t}.json")
    else:
        if cfg.mode == "pretrained":
            model = LtrModel.load(_require(cfg.model, "LTR model"))
            leaked = set(model.training_topics or []) & set(topics)
            if leaked:
                raise LeakageError(f"pretrained model was trained on evaluation topics {sorted(leaked)}")
        else:
            train_topics = sorted(cfg.train_topics or [])
            if not train_topics:
                raise PipelineError("train_test mode needs 'train_topics'")
            overlap = set(train_topics) & set(topics)
            if overlap:
                raise LeakageError(f"topics {sorted(overlap)} are both training and evaluation topics")
            training = LtrTrainingSet.build([matrices[t] for t in train_topics], qrels.restrict(train_topics))
            for t in topics:
                audit.append(audit_training_set(t, training))
            model = train(training, cfg.ltr_params)
            model.training_topics = list(training.topic_ids)
        model.save(models_dir / "model.json")
        inter = {t: score(model, matrices[t]) for t in topics}
    timings["ltr"] = time.perf_counter() - t0

    # stage 3 plus baseline
    runs_dir = out / "runs"
    for t in topics:
        (runs_dir / t).mkdir(parents=True, exist_ok=True)
        write_run(initial[t], "initial", runs_dir / t / "initial.txt")
        write_run(inter[t], "inter", runs_dir / t / "inter.txt")
    vec_dir = out / "vectors"
    vec_dir.mkdir(exist_ok=True)
    jobs = []
    for t in topics:
        V = document_vectors(index, inter[t].doc_ids, s2v, cfg.representation)
        np.save(vec_dir / f"{t}.npy", V)
        seed_vec = protocol_seed_vector(protocols[t], s2v) if cfg.representation == "sent2vec" else None
        jobs.append((t, inter[t], V, qrels.relevant(t), seed_vec))
    sims = _map(_simulate_job, jobs, cfg.workers, {"cfg": cfg})
    timings["feedback"] = time.perf_counter() - t0

    intra, autotar, traces = {}, {}, {"intra": {}, "autotar": {}}
    trace_dir = out / "traces"
    trace_dir.mkdir(exist_ok=True)
    for t, hybrid, at in sims:
        intra[t] = hybrid.ranking
        write_run(hybrid.ranking, "intra", runs_dir / t / "intra.txt")
        write_trace(hybrid.trace, trace_dir / f"{t}.intra.csv", topic_id=t)
        traces["intra"][t] = hybrid.trace
        if at is not None:
            autotar[t] = at.ranking
            write_run(at.ranking, "autotar", runs_dir / t / "autotar.txt")
            write_trace(at.trace, trace_dir / f"{t}.autotar.csv", topic_id=t)
            traces["autotar"][t] = at.trace

    runs = {"initial": {t: initial[t] for t in topics}, "inter": inter, "intra": intra}
    if autotar:
        runs["autotar"] = autotar
    for stage, per_topic in runs.items():
        path = runs_dir / f"{stage}.txt"
        path.unlink(missing_ok=True)
        for t in sorted(per_topic):
            write_run(per_topic[t], stage, path, append=True)

    # evaluation
    rep_dir = out / "reports"
    rep_dir.mkdir(exist_ok=True)
    reports = {s: evaluate_run(r, qrels, cfg.thresholds, name=s) for s, r in runs.items()}
    by_type: dict[str, dict[str, dict]] = {}
    for s, rep in reports.items():
        (rep_dir / f"{s}.json").write_text(rep.to_json())
        (rep_dir / f"{s}.csv").write_text(rep.to_csv())
        for rt in ReviewType:
            ids = [t for t in rep.topics if protocols[t].review_type is rt]
            if ids:
                by_type.setdefault(rt.value, {})[s] = {"n_topics": len(ids), **rep.subset(ids).macro}
    (rep_dir / "by_review_type.json").write_text(json.dumps(by_type, indent=2))
    table = compare(list(reports.values()))
    (rep_dir / "comparison.csv").write_text(table.to_csv())
    (rep_dir / "comparison.txt").write_text(table.to_text() + "\n")
    (rep_dir / "leakage_audit.json").write_text(json.dumps([a.to_dict() for a in audit], indent=2))

    for method, per_topic in traces.items():
        curves = [recall_curve([r.doc_id for r in tr], qrels.relevant(t), cfg.curve_depth)
                  for t, tr in sorted(per_topic.items()) if qrels.relevant(t)]
        if curves:
            (rep_dir / f"curve_{method}.csv").write_text(curve_csv(macro_curve(curves, cfg.curve_depth), method))

    _write_manifest(cfg, out, index_path, s2v_path, protocols, topics, qrels)
    timings["total"] = time.perf_counter() - t0
    logger.info("pipeline finished in %.1fs", timings["total"])
    return PipelineResult(runs, reports, table, audit, traces, by_type, out, timings)


def _write_manifest(cfg, out: Path, index_path: Path, s2v_path: Path, protocols, topics, qrels: Qrels) -> None:
    """Describe per-topic artifacts so the screening service can open sessions."""
    def rel(p: Path) -> str:
        return os.path.relpath(Path(p).resolve(), out.resolve())

    manifest = {
        "format": "tarscreen-artifacts",
        "version": 1,
        "index": rel(index_path),
        "sent_embeddings": rel(s2v_path),
        "representation": cfg.representation,
        "feedback": cfg.feedback_params.to_dict(),
        "C": cfg.C,
        "seed": cfg.seed,
        "qrels": rel(cfg.qrels),
        "protocols": rel(cfg.protocols),
        "topics": {
            t: {
                "review_type": protocols[t].review_type.value,
                "title": protocols[t].title,
                "candidates": f"runs/{t}/inter.txt",
                "vectors": f"vectors/{t}.npy",
                "n_relevant": len(qrels.relevant(t)),
            }
            for t in topics
        },
    }
    (out / "artifacts.json").write_text(json.dumps(manifest, indent=2))
