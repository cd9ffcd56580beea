import numpy as np
import pytest

from qmoe.bench import synth_dataset
from qmoe.tensor_core import Rng


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def nprng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_table():
    return synth_dataset(3, 40, 0.3, seed=11)


@pytest.fixture(scope="session")
def two_cluster():
    return synth_dataset(2, 100, 0.05, seed=5)


_ACCEPTANCE = []


@pytest.fixture
def accept(capsys):
    """Record one acceptance line, print it immediately, then assert it."""

    def record(n, ok, detail):
        line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((n, line))
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
