import csv
import json
import subprocess
import sys
import time

import httpx
import pytest
from fastapi.testclient import TestClient

from tarscreen import cli

PARAMS = "k=5,s_init=1,t_init=10,s_final=5,t_final=none"


def run(argv, capsys):
    t0 = time.perf_counter()
    try:
        code = cli.main(argv)
    except SystemExit as exc:
        code = exc.code
    elapsed = time.perf_counter() - t0
    cap = capsys.readouterr()
    assert elapsed < 10, f"{argv[0]} took {elapsed:.1f}s"
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


def _p(work, name):
    return str(work / name)


class TestChain:
    def test_synth_fixture(self, work, capsys):
        code, out, _ = run(["synth", "--fixture", "--out", _p(work, "data")], capsys)
        assert code == 0 and (work / "data" / "corpus.jsonl").exists()

    def test_index(self, work, capsys):
        code, out, _ = run(["index", "build", "--corpus", _p(work, "data/corpus.jsonl"), "--out", _p(work, "idx.bin"),
                            "--min-count", "3"], capsys)
        assert code == 0 and "200 documents" in out

    def test_retrieve(self, work, capsys):
        code, _, _ = run(["retrieve", "--index", _p(work, "idx.bin"), "--protocol", _p(work, "data/protocols"),
                          "--out", _p(work, "initial.txt")], capsys)
        assert code == 0
        topics = {ln.split()[0] for ln in (work / "initial.txt").read_text().splitlines()}
        assert len(topics) == 4

    def test_features(self, work, capsys):
        code, out, _ = run(["features", "extract", "--index", _p(work, "idx.bin"), "--protocol", _p(work, "data/protocols"),
                            "--candidates", _p(work, "initial.txt"), "--embeddings", _p(work, "data/w2v.txt"),
                            "--sent-embeddings", _p(work, "data/s2v.txt"), "--svd-rank", "8", "--seed", "1",
                            "--out", _p(work, "feats")], capsys)
        assert code == 0 and len(list((work / "feats").glob("*.json"))) == 4

    def test_ltr(self, work, capsys, caplog):
        code, out, _ = run(["ltr", "train", "--features-dir", _p(work, "feats"), "--qrels", _p(work, "data/qrels.txt"),
                            "--exclude", "CD00001", "--n-trees", "5", "--seed", "1", "--out", _p(work, "model.json")], capsys)
        assert code == 0 and "3 topics" in out
        code, _, _ = run(["ltr", "rank", "--model", _p(work, "model.json"), "--features", _p(work, "feats"),
                          "--out", _p(work, "inter.txt")], capsys)
        assert code == 0 and "training data" in caplog.text
        code, out, _ = run(["ltr", "importance", "--model", _p(work, "model.json"), "--top", "3", "--json"], capsys)
        rows = json.loads(out)
        assert code == 0 and len(rows) == 3 and rows[0]["gain"] >= rows[1]["gain"]

    def test_simulate_hybrid(self, work, capsys):
        code, _, _ = run(["simulate", "--candidates", _p(work, "inter.txt"), "--index", _p(work, "idx.bin"),
                          "--embeddings", _p(work, "data/s2v.txt"), "--qrels", _p(work, "data/qrels.txt"),
                          "--params", PARAMS, "--seed", "1", "--out", _p(work, "intra.txt"),
                          "--trace", _p(work, "trace.intra.csv")], capsys)
        assert code == 0
        with open(work / "trace.intra.csv") as fh:
            header = next(csv.reader(fh))
        assert header[:3] == ["topic_id", "step", "judged_doc"]

    def test_evaluate(self, work, capsys):
        code, out, _ = run(["evaluate", "--run", _p(work, "intra.txt"), "--qrels", _p(work, "data/qrels.txt")], capsys)
        report = json.loads(out)
        assert code == 0 and report["n_topics"] == 4 and set(report["macro"]) >= {"map", "wss100", "recall@5000"}
        code, out, _ = run(["evaluate", "--run", _p(work, "intra.txt"), "--qrels", _p(work, "data/qrels.txt"),
                            "--format", "csv", "--thresholds", "5,10"], capsys)
        assert out.splitlines()[0].startswith("topic_id,recall@5,recall@10")

    def test_curve(self, work, capsys):
        code, out, _ = run(["curve", "--traces", _p(work, "trace.intra.csv"), "--qrels", _p(work, "data/qrels.txt"),
                            "--depth", "20"], capsys)
        lines = out.strip().splitlines()
        assert code == 0 and len(lines) == 21 and lines[1].startswith("intra,1,")

    def test_pipeline(self, work, capsys):
        code, out, _ = run(["pipeline", "run", "--config", _p(work, "data/pipeline.json")], capsys)
        assert code == 0 and "intra" in out
        assert (work / "data" / "out" / "artifacts.json").exists()

    def test_simulate_autotar_from_artifacts(self, work, capsys):
        code, _, _ = run(["simulate", "--method", "autotar", "--artifacts", _p(work, "data/out"), "--budget", "20",
                          "--seed", "1", "--topic", "CD00002", "--out", _p(work, "at.txt"),
                          "--trace", _p(work, "at.csv")], capsys)
        assert code == 0
        assert len((work / "at.csv").read_text().splitlines()) == 21

    def test_sweep(self, work, capsys):
        code, out, _ = run(["sweep", "--artifacts", _p(work, "data/out"), "--grid", "10:20,10:40", "--params", PARAMS,
                            "--seed", "1"], capsys)
        rows = list(csv.DictReader(out.splitlines()))
        assert code == 0 and [(r["t_init"], r["t_final"]) for r in rows] == [("10", "20"), ("10", "40")]

    def test_serve_and_client(self, work, capsys, monkeypatch):
        import uvicorn

        captured = {}
        monkeypatch.setattr(uvicorn, "run", lambda app, **kw: captured.update(app=app, **kw))
        code, _, err = run(["serve", "--artifacts-dir", _p(work, "data/out"), "--data-dir", _p(work, "svc"),
                          "--port", "8123"], capsys)
        assert code == 0 and captured["port"] == 8123, err
        monkeypatch.setattr(httpx, "Client", lambda **kw: TestClient(captured["app"]))
        code, out, err = run(["client", "run", "--topic", "CD00003", "--qrels", _p(work, "data/qrels.txt"),
                            "--params", "k=5,t_init=10,s_final=5,t_final=15", "--seed", "1"], capsys)
        assert code == 0, err
        body = json.loads(out)
        assert body["judged"] >= 15 and body["stats"]["phase"] == "finished"
        code, out, _ = run(["client", "stats", "--session", body["session_id"]], capsys)
        assert code == 0 and json.loads(out)["judged"] == body["judged"]


class TestExitCodes:
    def test_no_args(self):
        r = subprocess.run([sys.executable, "-m", "tarscreen.cli"], capture_output=True, text=True)
        assert r.returncode == 1 and "usage" in r.stderr

    @pytest.mark.parametrize("argv", [["ltr"], ["frobnicate"], ["evaluate", "--run", "x"],
                                      ["sweep", "--artifacts", "x", "--grid", "200"]])
    def test_usage_errors(self, argv, capsys):
        assert run(argv, capsys)[0] == 1

    def test_help(self, capsys):
        assert run(["simulate", "--help"], capsys)[0] == 0

    def test_runtime_error(self, tmp_path, capsys):
        code, _, err = run(["evaluate", "--run", str(tmp_path / "none.txt"), "--qrels", str(tmp_path / "q.txt")], capsys)
        assert code == 2 and "error" in err
