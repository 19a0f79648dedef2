import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from tarscreen.pipeline import PipelineConfig, read_config, run_pipeline
from tarscreen.synthetic import SyntheticConfig, bundled_fixture, generate, write_benchmark

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(lines, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def verdict(request):
    """Record one acceptance line and assert it."""

    def record(name: str, ok: bool, detail: str = "") -> None:
        request.config.stash[_VERDICTS].append((name, bool(ok), detail))
        print(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"{name}: {detail}"

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_copy(tmp_path_factory) -> Path:
    dst = tmp_path_factory.mktemp("fixture") / "data"
    shutil.copytree(bundled_fixture(), dst)
    return dst


@pytest.fixture(scope="session")
def fixture_run(fixture_copy):
    cfg = PipelineConfig.load(fixture_copy / "pipeline.json")
    return run_pipeline(cfg)


TINY_CONFIG = SyntheticConfig(
    n_topics=2, docs_per_topic=15, n_relevant=4, n_hard=1, n_near_miss=3,
    dim=8, topic_words=10, general_words=30, seed=3,
)


@pytest.fixture(scope="session")
def tiny_artifacts(tmp_path_factory) -> Path:
    """Pipeline output over a 30-document, 2-topic corpus."""
    root = tmp_path_factory.mktemp("tiny")
    write_benchmark(generate(TINY_CONFIG), root, {
        "dictionary": {"min_count": 1, "max_doc_freq_ratio": 0.9},
        "features": {"svd_rank": 4},
        "ltr": {"n_trees": 5, "max_depth": 2},
        "feedback": {"k": 3, "s_init": 1, "t_init": 5, "s_final": 10, "t_final": None},
    })
    cfg = PipelineConfig.from_dict(read_config(root / "pipeline.json"), root)
    run_pipeline(cfg)
    return cfg.output_dir


@pytest.fixture(scope="session")
def benchmark_run(tmp_path_factory):
    """The 10-topic, 20,000-document benchmark run end to end, timed."""
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("bench")
    bench = generate(SyntheticConfig())
    write_benchmark(bench, root)
    cfg = PipelineConfig.from_dict(read_config(root / "pipeline.json"), root)
    result = run_pipeline(cfg)
    elapsed = time.perf_counter() - t0
    artifacts = json.loads((cfg.output_dir / "artifacts.json").read_text())
    return {"bench": bench, "cfg": cfg, "result": result, "elapsed": elapsed, "artifacts": artifacts}
