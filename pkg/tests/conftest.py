import numpy as np
import pytest

from advkws.datagen import CorpusSpec, collate, generate_corpus
from advkws.model import init_params, toy_config

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy():
    return toy_config()


@pytest.fixture(scope="session")
def small_corpus():
    spec = CorpusSpec(seed=3, counts=(6, 6, 6, 6), background_frames=(5, 10), distractor_words=(1, 1))
    return generate_corpus(spec)


@pytest.fixture
def toy_params(toy):
    return init_params(toy, 0, np.float64)


@pytest.fixture(scope="session")
def small_batch(small_corpus):
    return collate(small_corpus.examples(), np.float64)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
