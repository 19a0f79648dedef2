import json

import pytest

from tarscreen import pipeline as pl
from tarscreen.dataio import parse_qrels, read_run
from tarscreen.features import FeatureMatrix
from tarscreen.ltr import LtrParams
from tarscreen.pipeline import LeakageError, PipelineConfig, PipelineError, leave_one_out, read_config, run_pipeline

QUICK = {"features": {"svd_rank": 8}, "ltr": {"n_trees": 5, "max_depth": 2}, "autotar": {"enabled": False}}


def _cfg(src, out, **over):
    obj = {**read_config(src / "pipeline.json"), "output_dir": str(out), **over}
    return PipelineConfig.from_dict(obj, src)


def _matrices(result):
    fdir = result.output_dir / "cache" / "features"
    return {m.topic_id: m for m in (FeatureMatrix.load(p) for p in sorted(fdir.glob("*.json")))}


class TestFullRun:
    def test_outputs(self, fixture_run):
        out = fixture_run.output_dir
        topics = sorted(fixture_run.runs["inter"])
        assert len(topics) == 4
        for t in topics:
            for stage in ("initial", "inter", "intra", "autotar"):
                assert (out / "runs" / t / f"{stage}.txt").exists()
        for name in ("comparison.csv", "by_review_type.json", "leakage_audit.json", "curve_intra.csv", "curve_autotar.csv"):
            assert (out / "reports" / name).exists()
        assert len(json.loads((out / "reports" / "by_review_type.json").read_text())) == 4
        assert set(json.loads((out / "artifacts.json").read_text())["topics"]) == set(topics)

    def test_intra_candidates_are_inter_run(self, fixture_run):
        out = fixture_run.output_dir
        for t, inter in fixture_run.runs["inter"].items():
            assert read_run(out / "runs" / t / "inter.txt")[t] == inter
            trace_docs = [r.doc_id for r in fixture_run.traces["intra"][t]]
            assert sorted(fixture_run.runs["intra"][t].doc_ids) == sorted(inter.doc_ids)
            assert fixture_run.runs["intra"][t].doc_ids[: len(trace_docs)] == trace_docs

    def test_audit(self, fixture_run):
        for entry in fixture_run.audit:
            assert entry.held_out not in entry.training_topics
            assert len(entry.training_topics) == 3


class TestLeaveOneOut:
    def test_two_topics(self, fixture_run, fixture_copy):
        mats = _matrices(fixture_run)
        two = {t: mats[t] for t in sorted(mats)[:2]}
        res = leave_one_out(two, parse_qrels(fixture_copy / "qrels.txt"), LtrParams(n_trees=5))
        assert set(res.models) == set(two)
        for held, model in res.models.items():
            assert model.training_topics == [t for t in two if t != held]

    def test_order_independent(self, fixture_run, fixture_copy):
        mats = _matrices(fixture_run)
        q = parse_qrels(fixture_copy / "qrels.txt")
        fwd = leave_one_out(dict(sorted(mats.items())), q, LtrParams(n_trees=5))
        rev = leave_one_out(dict(sorted(mats.items(), reverse=True)), q, LtrParams(n_trees=5))
        assert fwd.rankings == rev.rankings

    def test_needs_two(self, fixture_run, fixture_copy, tmp_path):
        mats = _matrices(fixture_run)
        with pytest.raises(PipelineError):
            leave_one_out({"x": next(iter(mats.values()))}, parse_qrels(fixture_copy / "qrels.txt"))
        with pytest.raises(PipelineError, match="two topics"):
            run_pipeline(_cfg(fixture_copy, tmp_path, topics=["CD00001"], **QUICK))


class TestConfig:
    def test_unknown_key(self, fixture_copy, tmp_path):
        with pytest.raises(PipelineError, match="bogus"):
            _cfg(fixture_copy, tmp_path, bogus=1)

    def test_missing_artifact_named(self, fixture_copy, tmp_path):
        with pytest.raises(PipelineError, match="word embeddings"):
            run_pipeline(_cfg(fixture_copy, tmp_path, word_embeddings="nowhere.txt"))
        with pytest.raises(PipelineError, match="CD99999"):
            run_pipeline(_cfg(fixture_copy, tmp_path, topics=["CD00001", "CD99999"]))

    def test_toml(self, fixture_copy, tmp_path):
        toml = fixture_copy / "pipeline.toml"
        toml.write_text(
            'corpus = "corpus.jsonl"\nprotocols = "protocols"\nqrels = "qrels.txt"\n'
            'word_embeddings = "w2v.txt"\nsent_embeddings = "s2v.txt"\n'
            f'output_dir = "{tmp_path / "out"}"\nseed = 42\n[feedback]\nk = 5\nt_init = 10\n'
        )
        cfg = PipelineConfig.load(toml)
        assert cfg.feedback_params.k == 5 and cfg.corpus == fixture_copy / "corpus.jsonl"

    def test_bad_file(self, tmp_path):
        with pytest.raises(PipelineError):
            read_config(tmp_path / "absent.json")
        (tmp_path / "c.json").write_text("{oops")
        with pytest.raises(PipelineError):
            read_config(tmp_path / "c.json")


class TestModes:
    def test_t_final_beyond_candidates(self, fixture_copy, tmp_path):
        fb = {"k": 5, "s_init": 1, "t_init": 10, "s_final": 5, "t_final": 100000}
        res = run_pipeline(_cfg(fixture_copy, tmp_path, feedback=fb, **QUICK))
        for t, inter in res.runs["inter"].items():
            assert len(res.traces["intra"][t]) == len(inter)

    def test_train_test_single_topic(self, fixture_copy, tmp_path):
        res = run_pipeline(_cfg(fixture_copy, tmp_path, mode="train_test", topics=["CD00001"],
                                train_topics=["CD00002", "CD00003", "CD00004"], **QUICK))
        for stage in ("initial", "inter", "intra"):
            assert (tmp_path / "runs" / "CD00001" / f"{stage}.txt").exists()
        assert res.audit[0].training_topics == ["CD00002", "CD00003", "CD00004"]

    def test_train_test_overlap(self, fixture_copy, tmp_path):
        with pytest.raises(LeakageError):
            run_pipeline(_cfg(fixture_copy, tmp_path, mode="train_test", topics=["CD00001", "CD00002"],
                              train_topics=["CD00002", "CD00003"], **QUICK))

    def test_pretrained_leakage(self, fixture_run, fixture_copy, tmp_path):
        model = fixture_run.output_dir / "models" / "CD00001.json"
        with pytest.raises(LeakageError):
            run_pipeline(_cfg(fixture_copy, tmp_path, mode="pretrained", model=str(model),
                              topics=["CD00002"], **QUICK))
        res = run_pipeline(_cfg(fixture_copy, tmp_path / "ok", mode="pretrained", model=str(model),
                                topics=["CD00001"], **QUICK))
        assert "CD00001" in res.runs["intra"]

    def test_feature_cache_reused(self, fixture_copy, tmp_path, monkeypatch):
        cfg = _cfg(fixture_copy, tmp_path, **QUICK)
        first = run_pipeline(cfg)

        def boom(*a, **k):
            raise AssertionError("features recomputed")

        monkeypatch.setattr(pl, "extract_topic_features", boom)
        second = run_pipeline(cfg)
        assert second.runs == first.runs
