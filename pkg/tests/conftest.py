import numpy as np
import pytest

from frame_ssl import tensor as T


@pytest.fixture(autouse=True)
def float64():
    """Unit tests run at 64-bit; tests that train switch to 32-bit locally."""
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import summary_lines

    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
