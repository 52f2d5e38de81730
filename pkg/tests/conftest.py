import numpy as np
import pytest
from hypothesis import settings

from meascascade.synthgen import GrammarSpec, generate

settings.register_profile("default", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mini_corpus():
    """20 synthetic documents; shared read-only across tests."""
    corpus, _ = generate(GrammarSpec(seed=7), 20)
    return corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
