import numpy as np
import pytest

from cephmark.tensor import SeededRng


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(7)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} | {name} | {detail}")
