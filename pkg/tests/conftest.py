import numpy as np
import pytest

from cbna.acceptance import _random_source_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def source_model():
    """Toy model with non-trivial BN source statistics (no training needed)."""
    return _random_source_model(5)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULT_LINES

    if RESULT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in RESULT_LINES:
            terminalreporter.write_line(line)
