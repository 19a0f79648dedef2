"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from pathlib import Path

logger = logging.getLogger("tarscreen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(args) -> int:
    if getattr(args, "seed", None) is None:
        args.seed = random.SystemRandom().randrange(2**31)
        logger.warning("no --seed given; using random seed %d", args.seed)
    return args.seed


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _protocols(path: str):
    from .dataio import load_protocols, parse_protocol

    p = Path(path)
    if p.is_dir():
        return load_protocols(p)
    proto = parse_protocol(p)
    return {proto.topic_id: proto}


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# index / retrieve / features


def cmd_index_build(args) -> None:
    from .corpus import build_dictionary, build_index, read_corpus

    docs = read_corpus(args.corpus)
    d = build_dictionary(docs, max_terms=args.max_terms, max_doc_freq_ratio=args.max_df, min_count=args.min_count)
    index = build_index(docs, d)
    index.save(args.out)
    print(f"indexed {index.N} documents, {len(d)} terms -> {args.out}")


def cmd_retrieve(args) -> None:
    from .corpus import InvertedIndex
    from .dataio import write_run
    from .retrieval import primary_retrieve

    index = InvertedIndex.load(args.index)
    protos = _protocols(args.protocol)
    Path(args.out).unlink(missing_ok=True)
    for topic_id in sorted(protos):
        ranking = primary_retrieve(protos[topic_id], index, k=args.k, fusion=args.fusion, k1=args.k1, b=args.b)
        write_run(ranking, args.run_name, args.out, append=True)
        logger.info("%s: %d candidates", topic_id, len(ranking))


def cmd_features_extract(args) -> None:
    from .corpus import InvertedIndex
    from .dataio import parse_embeddings, read_run
    from .features import FeatureContext, extract_topic_features

    index = InvertedIndex.load(args.index)
    protos = _protocols(args.protocol)
    runs = read_run(args.candidates)
    w2v = parse_embeddings(args.embeddings)
    s2v = parse_embeddings(args.sent_embeddings) if args.sent_embeddings else w2v
    ctx = FeatureContext.fit(index, w2v, s2v, svd_rank=args.svd_rank, seed=_seed(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for topic_id in sorted(protos):
        if topic_id not in runs:
            raise RuntimeError(f"candidate run has no topic {topic_id}")
        m = extract_topic_features(protos[topic_id], runs[topic_id].doc_ids, ctx)
        m.save(out / topic_id)
        print(f"{topic_id}: {len(m.doc_ids)} x 72 -> {out / topic_id}.npy")


# ---------------------------------------------------------------------------
# ltr


def _load_matrices(path: str):
    from .features import FeatureMatrix

    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not files:
        raise RuntimeError(f"no feature matrices found in {path}")
    return {m.topic_id: m for m in (FeatureMatrix.load(f) for f in files)}


def cmd_ltr_train(args) -> None:
    from .dataio import parse_qrels
    from .ltr import LtrParams, LtrTrainingSet, train

    mats = _load_matrices(args.features_dir)
    exclude = set(args.exclude or [])
    qrels = parse_qrels(args.qrels)
    keep = [t for t in sorted(mats) if t not in exclude]
    training = LtrTrainingSet.build([mats[t] for t in keep], qrels.restrict(keep))
    params = LtrParams(n_trees=args.n_trees, learning_rate=args.learning_rate, max_depth=args.max_depth,
                       min_child_weight=args.min_child_weight, seed=_seed(args))
    model = train(training, params)
    model.save(args.out)
    print(f"trained {len(model.trees)} trees on {len(training.groups)} topics -> {args.out}")


def cmd_ltr_rank(args) -> None:
    from .dataio import write_run
    from .ltr import LtrModel, score

    model = LtrModel.load(args.model)
    mats = _load_matrices(args.features)
    Path(args.out).unlink(missing_ok=True)
    for t in sorted(mats):
        if t in (model.training_topics or []):
            logger.warning("topic %s was part of this model's training data", t)
        write_run(score(model, mats[t]), args.run_name, args.out, append=True)


def cmd_ltr_importance(args) -> None:
    from .ltr import LtrModel, feature_importance

    imp = feature_importance(LtrModel.load(args.model))
    rows = imp.top(args.top)
    if args.json:
        print(json.dumps([{"feature": i, "name": n, "gain": g} for i, n, g in rows], indent=2))
        return
    for i, n, g in rows:
        print(f"{i:>3}  {g:>14.4f}  {n}")


# ---------------------------------------------------------------------------
# simulate / sweep


def _simulation_inputs(args):
    """Candidate rankings, row-aligned vectors, qrels and protocols for simulate/sweep."""
    from .corpus import InvertedIndex
    from .dataio import load_protocols, parse_embeddings, parse_qrels, read_run
    from .feedback import document_vectors

    qrels = parse_qrels(args.qrels) if args.qrels else None
    protocols = _protocols(args.protocols) if getattr(args, "protocols", None) else {}
    if args.artifacts:
        import numpy as np

        root = Path(args.artifacts)
        manifest = json.loads((root / "artifacts.json").read_text())
        runs, vectors = {}, {}
        for t, info in manifest["topics"].items():
            runs[t] = read_run(root / info["candidates"])[t]
            vectors[t] = np.load(root / info["vectors"])
        if qrels is None:
            qrels = parse_qrels(root / manifest["qrels"])
        if not protocols and manifest.get("protocols"):
            protocols = load_protocols(root / manifest["protocols"])
        sent = parse_embeddings(root / manifest["sent_embeddings"]) if args.method == "autotar" else None
        return runs, vectors, qrels, protocols, sent
    if args.candidates is None and args.model is None:
        raise UsageError("give --artifacts, --candidates or --model with --features")
    if not (args.index and args.embeddings and qrels is not None):
        raise UsageError("--index, --embeddings and --qrels are required without --artifacts")
    if args.model:
        from .ltr import LtrModel, score

        if not args.features:
            raise UsageError("--model needs --features")
        model = LtrModel.load(args.model)
        runs = {t: score(model, m) for t, m in _load_matrices(args.features).items()}
    else:
        runs = read_run(args.candidates)
    index = InvertedIndex.load(args.index)
    sent = parse_embeddings(args.embeddings)
    vectors = {t: document_vectors(index, r.doc_ids, sent, args.representation) for t, r in runs.items()}
    return runs, vectors, qrels, protocols, sent


def cmd_simulate(args) -> None:
    from .baselines import protocol_seed_vector, run_autotar
    from .dataio import write_run
    from .feedback import FeedbackParams, OracleReviewer, simulate, write_trace

    seed = _seed(args)
    runs, vectors, qrels, protocols, sent = _simulation_inputs(args)
    topics = [args.topic] if args.topic else sorted(runs)
    params = FeedbackParams.parse(args.params)
    Path(args.out).unlink(missing_ok=True)
    trace_rows = []
    for t in topics:
        if t not in runs:
            raise RuntimeError(f"no candidates for topic {t}")
        reviewer = OracleReviewer(qrels.relevant(t))
        if args.method == "autotar":
            if t not in protocols:
                raise UsageError(f"autotar needs the protocol of {t} (--protocols)")
            seed_vec = protocol_seed_vector(protocols[t], sent)
            budget = min(args.budget or len(runs[t]), len(runs[t]))
            res = run_autotar(runs[t], seed_vec, vectors[t], reviewer, budget=budget, seed=seed, C=args.C)
        else:
            res = simulate(runs[t], vectors[t], reviewer, params, seed=seed, C=args.C)
        write_run(res.ranking, args.run_name or args.method, args.out, append=True)
        trace_rows.extend((t, r) for r in res.trace)
        logger.info("%s: %d judged, %d relevant found", t, len(res.trace), sum(r.label for r in res.trace))
    if args.trace:
        if args.topic:
            write_trace([r for _, r in trace_rows], args.trace, topic_id=args.topic)
        else:
            _write_multi_trace(trace_rows, args.trace)


def _write_multi_trace(rows, path) -> None:
    import csv

    from .feedback import TRACE_HEADER

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("topic_id",) + TRACE_HEADER)
        for t, r in rows:
            w.writerow((t, r.step, r.doc_id, r.label, r.judged, r.round, r.batch_size))


def _grid(text: str) -> list[tuple[int, int]]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        a, sep, b = part.partition(":")
        try:
            out.append((int(a), int(b)))
        except ValueError:
            raise UsageError(f"grid entries look like t_init:t_final, got {part!r}") from None
        if not sep:
            raise UsageError(f"grid entries look like t_init:t_final, got {part!r}")
    if not out:
        raise UsageError("empty --grid")
    return out


def cmd_sweep(args) -> None:
    import csv
    import io

    from .feedback import SWEEP_COLUMNS, FeedbackParams, SweepTopic, parameter_sweep

    grid = _grid(args.grid)
    args.method = "hybrid"
    seed = _seed(args)
    runs, vectors, qrels, _, _ = _simulation_inputs(args)
    topics = [SweepTopic(runs[t], vectors[t], qrels.relevant(t)) for t in sorted(runs)]
    rows = parameter_sweep(topics, grid, FeedbackParams.parse(args.params), seed=seed, C=args.C)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(SWEEP_COLUMNS))
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), args.out)


# ---------------------------------------------------------------------------
# evaluation


def cmd_evaluate(args) -> None:
    from .dataio import parse_qrels, read_run
    from .evaluation import evaluate_run

    thresholds = _ints(args.thresholds)
    report = evaluate_run(read_run(args.run), parse_qrels(args.qrels), thresholds, name=args.name or Path(args.run).stem)
    _emit(report.to_csv() if args.format == "csv" else report.to_json(), args.out)


def cmd_curve(args) -> None:
    import csv

    from .dataio import parse_qrels
    from .evaluation import curve_csv, macro_curve, recall_curve

    qrels = parse_qrels(args.qrels)
    root = Path(args.traces)
    files = sorted(root.glob("*.csv")) if root.is_dir() else [root]
    per_method: dict[str, list] = {}
    for f in files:
        seqs: dict[str, list[str]] = {}
        with open(f, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if "topic_id" not in (reader.fieldnames or []):
                raise RuntimeError(f"{f}: trace needs a topic_id column")
            for rec in reader:
                seqs.setdefault(rec["topic_id"], []).append(rec["judged_doc"])
        method = f.stem.split(".")[-1] if "." in f.stem else args.method
        for t, seq in sorted(seqs.items()):
            rel = qrels.relevant(t)
            if rel:
                per_method.setdefault(method, []).append(recall_curve(seq, rel, args.depth))
    if not per_method:
        raise RuntimeError("no traces with relevant documents found")
    text = ""
    for i, (method, curves) in enumerate(sorted(per_method.items())):
        block = curve_csv(macro_curve(curves, args.depth), method)
        text += block if i == 0 else block.split("\n", 1)[1]
    _emit(text, args.out)


# ---------------------------------------------------------------------------
# pipeline / service / extras


def cmd_pipeline_run(args) -> None:
    from .pipeline import PipelineConfig, read_config, run_pipeline

    raw = read_config(args.config)
    cfg = PipelineConfig.from_dict(raw, Path(args.config).parent)
    # values in the config file take precedence over flags
    if "workers" not in raw and args.workers:
        cfg.workers = args.workers
    if "seed" not in raw and args.seed is not None:
        cfg.seed = args.seed
    elif "seed" not in raw:
        cfg.seed = _seed(args)
    result = run_pipeline(cfg)
    print(result.comparison.to_text())
    print(f"outputs in {result.output_dir}")


def cmd_serve(args) -> None:
    import uvicorn

    from .service import create_app

    app = create_app(args.artifacts_dir, args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")


def cmd_synth(args) -> None:
    import shutil

    from .synthetic import SyntheticConfig, bundled_fixture, generate, write_benchmark

    if args.fixture:
        shutil.copytree(bundled_fixture(), args.out, dirs_exist_ok=True)
        print(f"fixture copied to {args.out}")
        return
    cfg = SyntheticConfig(n_topics=args.topics, docs_per_topic=args.docs_per_topic, seed=_seed(args))
    paths = write_benchmark(generate(cfg), args.out)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))


def cmd_client_run(args) -> None:
    from .client import ScreeningClient, drive_with_oracle
    from .dataio import parse_qrels

    with ScreeningClient(args.url) as client:
        relevant = parse_qrels(args.qrels).relevant(args.topic)
        params = _params_dict(args.params)
        sid, seq = drive_with_oracle(client, args.topic, relevant, params=params, seed=args.seed,
                                     max_judgments=args.max_judgments)
        print(json.dumps({"session_id": sid, "judged": len(seq), "stats": client.stats(sid)}, indent=2))


def _params_dict(text: str | None) -> dict | None:
    if not text:
        return None
    from .feedback import FeedbackParams

    return FeedbackParams.parse(text).to_dict()


def cmd_client_stats(args) -> None:
    from .client import ScreeningClient

    with ScreeningClient(args.url) as client:
        print(json.dumps(client.stats(args.session), indent=2))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tarscreen", description="Screening prioritization for systematic reviews.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    idx = sub.add_parser("index", help="inverted index commands")
    idx_sub = idx.add_subparsers(dest="sub", parser_class=_Parser)
    b = idx_sub.add_parser("build", help="build an index from a JSONL corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--max-terms", type=int, default=100_000)
    b.add_argument("--max-df", type=float, default=0.5)
    b.add_argument("--min-count", type=int, default=10)
    b.set_defaults(func=cmd_index_build)

    r = sub.add_parser("retrieve", help="two-query BM25 retrieval per protocol")
    r.add_argument("--index", required=True)
    r.add_argument("--protocol", required=True, help="protocol JSON file or directory")
    r.add_argument("--k", type=int, default=100_000)
    r.add_argument("--fusion", choices=("score", "rank"), default="score")
    r.add_argument("--k1", type=float, default=1.2)
    r.add_argument("--b", type=float, default=0.75)
    r.add_argument("--run-name", default="initial")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_retrieve)

    f = sub.add_parser("features", help="feature extraction")
    f_sub = f.add_subparsers(dest="sub", parser_class=_Parser)
    fe = f_sub.add_parser("extract", help="72-feature matrices for candidate documents")
    fe.add_argument("--index", required=True)
    fe.add_argument("--protocol", required=True)
    fe.add_argument("--candidates", required=True)
    fe.add_argument("--embeddings", required=True, help="word vectors (WMD)")
    fe.add_argument("--sent-embeddings", help="sentence-embedding vectors (defaults to --embeddings)")
    fe.add_argument("--svd-rank", type=int, default=64)
    fe.add_argument("--seed", type=int)
    fe.add_argument("--out", required=True, help="output directory")
    fe.set_defaults(func=cmd_features_extract)

    ltr = sub.add_parser("ltr", help="learning-to-rank commands")
    ltr_sub = ltr.add_subparsers(dest="sub", parser_class=_Parser)
    lt = ltr_sub.add_parser("train")
    lt.add_argument("--features-dir", required=True)
    lt.add_argument("--qrels", required=True)
    lt.add_argument("--out", required=True)
    lt.add_argument("--exclude", action="append", help="topic to leave out (repeatable)")
    lt.add_argument("--n-trees", type=int, default=100)
    lt.add_argument("--learning-rate", type=float, default=0.3)
    lt.add_argument("--max-depth", type=int, default=6)
    lt.add_argument("--min-child-weight", type=float, default=1.0)
    lt.add_argument("--seed", type=int)
    lt.set_defaults(func=cmd_ltr_train)
    lr = ltr_sub.add_parser("rank")
    lr.add_argument("--model", required=True)
    lr.add_argument("--features", required=True, help="feature matrix JSON sidecar or directory")
    lr.add_argument("--run-name", default="inter")
    lr.add_argument("--out", required=True)
    lr.set_defaults(func=cmd_ltr_rank)
    li = ltr_sub.add_parser("importance")
    li.add_argument("--model", required=True)
    li.add_argument("--top", type=int, default=15)
    li.add_argument("--json", action="store_true")
    li.set_defaults(func=cmd_ltr_importance)

    def sim_inputs(sp):
        sp.add_argument("--artifacts", help="pipeline output directory (artifacts.json)")
        sp.add_argument("--candidates", help="candidate run file (inter-review ranking)")
        sp.add_argument("--model", help="LTR model used to rank --features instead of --candidates")
        sp.add_argument("--features")
        sp.add_argument("--index")
        sp.add_argument("--embeddings", help="sentence-embedding vectors for document representations")
        sp.add_argument("--representation", choices=("sent2vec", "tfidf"), default="sent2vec")
        sp.add_argument("--qrels")
        sp.add_argument("--params", default="k=10,s_init=1,t_init=200,s_final=50,t_final=1000")
        sp.add_argument("--C", type=float, default=0.5)
        sp.add_argument("--seed", type=int)

    s = sub.add_parser("simulate", help="simulate screening with an oracle reviewer")
    sim_inputs(s)
    s.add_argument("--method", choices=("hybrid", "autotar"), default="hybrid")
    s.add_argument("--protocols", help="protocol file or directory (autotar seed document)")
    s.add_argument("--budget", type=int, help="autotar judgment budget (default: all candidates)")
    s.add_argument("--topic")
    s.add_argument("--run-name")
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.set_defaults(func=cmd_simulate)

    sw = sub.add_parser("sweep", help="(t_init, t_final) parameter sweep")
    sim_inputs(sw)
    sw.add_argument("--grid", required=True, help='e.g. "200:1000,200:2000"')
    sw.add_argument("--out")
    sw.set_defaults(func=cmd_sweep)

    e = sub.add_parser("evaluate", help="metrics for a run file")
    e.add_argument("--run", required=True)
    e.add_argument("--qrels", required=True)
    e.add_argument("--thresholds", default="10,50,100,5000")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--name")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("curve", help="macro recall curve with 95%% CI from traces")
    c.add_argument("--traces", required=True, help="trace CSV or directory of them")
    c.add_argument("--qrels", required=True)
    c.add_argument("--depth", type=int, default=200)
    c.add_argument("--method", default="run", help="label when the file name carries none")
    c.add_argument("--out")
    c.set_defaults(func=cmd_curve)

    pl = sub.add_parser("pipeline", help="end-to-end pipeline")
    pl_sub = pl.add_subparsers(dest="sub", parser_class=_Parser)
    pr = pl_sub.add_parser("run")
    pr.add_argument("--config", required=True)
    pr.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    pr.add_argument("--seed", type=int)
    pr.set_defaults(func=cmd_pipeline_run)

    sv = sub.add_parser("serve", help="run the screening HTTP service")
    sv.add_argument("--artifacts-dir", required=True)
    sv.add_argument("--data-dir")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.set_defaults(func=cmd_serve)

    sy = sub.add_parser("synth", help="write a synthetic benchmark")
    sy.add_argument("--out", required=True)
    sy.add_argument("--fixture", action="store_true", help="the small 200-document fixture")
    sy.add_argument("--topics", type=int, default=10)
    sy.add_argument("--docs-per-topic", type=int, default=2000)
    sy.add_argument("--seed", type=int)
    sy.set_defaults(func=cmd_synth)

    cl = sub.add_parser("client", help="talk to a running screening service")
    cl_sub = cl.add_subparsers(dest="sub", parser_class=_Parser)
    cr = cl_sub.add_parser("run", help="screen a topic to the end with an oracle reviewer")
    cr.add_argument("--url", default="http://127.0.0.1:8000")
    cr.add_argument("--topic", required=True)
    cr.add_argument("--qrels", required=True)
    cr.add_argument("--params")
    cr.add_argument("--seed", type=int)
    cr.add_argument("--max-judgments", type=int)
    cr.set_defaults(func=cmd_client_run)
    cs = cl_sub.add_parser("stats")
    cs.add_argument("--url", default="http://127.0.0.1:8000")
    cs.add_argument("--session", required=True)
    cs.set_defaults(func=cmd_client_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    func = getattr(args, "func", None)
    if func is None:
        # top-level or group command without a subcommand
        target = parser
        if args.command:
            target = parser._subparsers._group_actions[0].choices[args.command]
        target.print_usage(sys.stderr)
        return 1
    try:
        func(args)
    except UsageError as exc:
        print(f"tarscreen: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("command failed", exc_info=True)
        print(f"tarscreen: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
