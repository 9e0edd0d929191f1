import numpy as np
import pytest

from annealprune.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def gen():
    return np.random.default_rng(99)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
