import numpy as np
import pytest

from cass.pattern import BoardSpec, default_dictionary


@pytest.fixture(scope="session")
def dictionary():
    return default_dictionary()


@pytest.fixture(scope="session")
def board():
    # 24 mm markers: modules, gaps and pitch are whole pixels at 5 or 10 px/mm
    return BoardSpec(5, 7, 24.0, 0.25)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in RESULTS.lines():
        terminalreporter.write_line(line)
