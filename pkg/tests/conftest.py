import warnings

import numpy as np
import pytest


@pytest.fixture(autouse=True)
def _quiet_window_warnings():
    # solves outside the sufficient window warn by design; tests check results
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="lambda=.*outside the window")
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
