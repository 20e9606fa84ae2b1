import numpy as np
import pytest

from htprior import hough


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_mask():
    return hough.vote_mask_for(9, 7, 21, 12)


@pytest.fixture(scope="session")
def exp_mask():
    return hough.vote_mask_for(100, 100)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
