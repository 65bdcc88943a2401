"""Shared fixtures: a fixed language pair, a small corpus, and the full 3-seed pipeline runs."""
import os

import pytest

from avdub.config import ExperimentConfig
from avdub.corpus import build_language_pair, generate_corpus
from avdub.experiments import SeedRun

PIPELINE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def pair():
    return build_language_pair(40, 0)


@pytest.fixture(scope="session")
def small_corpus(pair):
    return generate_corpus(pair, n_train=120, n_test=30, base_seed=50_000)


@pytest.fixture(scope="session")
def paper_runs():
    """Default-config runs for seeds 0, 1, 2; models train lazily and are shared across tests."""
    os.environ.pop("AVS2S_SEED", None)
    return [SeedRun(ExperimentConfig(), s) for s in PIPELINE_SEEDS]


@pytest.fixture(scope="session")
def trained_expert(paper_runs):
    return paper_runs[0].expert()


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> one-line PASS/FAIL verdict, echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


def pytest_collection_modifyitems(config, items):
    for item in items:
        if "paper_runs" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
