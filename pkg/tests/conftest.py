"""Shared trained runs for the acceptance suite, and the PASS/FAIL summary."""

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from par import pipeline  # noqa: E402
from par.config import RunConfig  # noqa: E402
from par.synthdata import build_corpus  # noqa: E402

RESULTS: list[str] = []


def record(criterion: str, ok: bool, detail: str, seconds: float | None = None) -> None:
    took = f" [{seconds:.1f} s]" if seconds is not None else ""
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}{took}")


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)


@dataclass
class TrainedRun:
    cfg: RunConfig
    corpus: pipeline.Corpus
    codec: object
    model: object
    history: object
    codec_report: object
    seconds: float  # codec plus model training
    codec_seconds: float = 0.0


# H=32 twin runs. 0.125 of a 64 px wide image is 4 px of pre-padding, which is
# not a whole latent column, so these use r = 0.25.
OVERFIT = dict(image_size=32, r_pre=0.25, r_post=0.25, codec_steps=1500, steps=1000, checkpoint_every=0, seed=0)


@pytest.fixture(scope="session")
def corpus32(tmp_path_factory):
    root = tmp_path_factory.mktemp("c32")
    build_corpus(16, 7, root / "train", 32)
    build_corpus(8, 8, root / "held", 32)
    return root


@pytest.fixture(scope="session")
def codec32(corpus32, tmp_path_factory):
    cfg = RunConfig(corpus_dir=str(corpus32 / "train"), run_dir=str(tmp_path_factory.mktemp("codec32")), **OVERFIT).validate()
    t = time.perf_counter()
    corpus = pipeline.load_corpus(cfg, "all")
    codec, report = pipeline.run_train_codec(cfg, corpus)
    return cfg, corpus, codec, report, time.perf_counter() - t


def _par_run(codec32, lam: float) -> TrainedRun:
    cfg, corpus, codec, report, codec_seconds = codec32
    cfg = cfg.replace(lam=lam)
    t = time.perf_counter()
    model, history, _ = pipeline.run_train(cfg, codec, corpus, resume=False, save=False)
    return TrainedRun(cfg, corpus, codec, model, history, report, codec_seconds + time.perf_counter() - t, codec_seconds)


@pytest.fixture(scope="session")
def run_lam(codec32):
    return _par_run(codec32, 0.1)


@pytest.fixture(scope="session")
def run_nolam(codec32):
    return _par_run(codec32, 0.0)


@pytest.fixture(scope="session")
def run64(tmp_path_factory):
    root = tmp_path_factory.mktemp("c64")
    build_corpus(16, 7, root / "train", 64)
    cfg = RunConfig(corpus_dir=str(root / "train"), run_dir=str(root / "run"), image_size=64, codec_steps=1000,
                    steps=300, checkpoint_every=0).validate()
    t = time.perf_counter()
    corpus = pipeline.load_corpus(cfg, "all")
    codec, report = pipeline.run_train_codec(cfg, corpus)
    model, history, _ = pipeline.run_train(cfg, codec, corpus, resume=False, save=False)
    return TrainedRun(cfg, corpus, codec, model, history, report, time.perf_counter() - t)
