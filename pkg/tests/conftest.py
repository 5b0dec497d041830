"""Shared, session-scoped corpora and trained models (expensive to build, built once)."""

from __future__ import annotations

import warnings

import numpy as np
import pytest

from morphreg.config import make_config
from morphreg.pipeline import annotate, coarse_normalize, train_models
from morphreg.remesh import remesh_spherical
from morphreg.synthetic import TEST_SEEDS, TRAIN_SEEDS, generate_corpus
from morphreg.tps import register_surface

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    """Store one criterion outcome; the terminal summary prints them in order."""
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def cfg():
    return make_config()


@pytest.fixture(scope="session")
def train_corpus():
    return list(generate_corpus(TRAIN_SEEDS))


@pytest.fixture(scope="session")
def train_frames(train_corpus, cfg):
    return [coarse_normalize(m, cfg) for _, m, _ in train_corpus]


@pytest.fixture(scope="session")
def trained(train_corpus, train_frames, cfg):
    """(models, report) trained on TRAIN-80."""
    return train_models([(m, l) for _, m, l in train_corpus], cfg, frames=train_frames)


@pytest.fixture(scope="session")
def models(trained):
    return trained[0]


@pytest.fixture(scope="session")
def test_corpus():
    return list(generate_corpus(TEST_SEEDS))


@pytest.fixture(scope="session")
def test_annotations(test_corpus, models, cfg):
    """Automatic landmarks for every TEST-50 face, keyed by seed."""
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for seed, mesh, _ in test_corpus:
            out[seed] = annotate(mesh, models, cfg)
    return out


def _remeshed_reference(seed_mesh_truth, cfg):
    _, mesh, truth = seed_mesh_truth
    cf = coarse_normalize(mesh, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = remesh_spherical(cf.mesh, step=cfg["remesh"]["step"])
    return r, truth.transformed(cf.transform), cf


@pytest.fixture(scope="session")
def reference_a(train_corpus, cfg):
    """Face TRAIN[0] remeshed in its coarse frame: (RemeshResult, landmarks, CoarseFrame)."""
    return _remeshed_reference(train_corpus[0], cfg)


@pytest.fixture(scope="session")
def reference_b(train_corpus, reference_a, cfg):
    """A second, distinct reference face carried onto reference A's triangulation."""
    ra, la, _ = reference_a
    _, mesh, truth = train_corpus[1]
    reg = register_surface(ra.mesh, la, mesh, truth)
    return reg.mesh, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def acceptance():
    """The `record_acceptance` callback, for modules that cannot import conftest."""
    return record_acceptance
