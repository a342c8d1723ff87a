import numpy as np
import pytest

from bapm.tensor import precision


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


# one verdict line per acceptance criterion, shown after the run
VERDICTS: dict[int, str] = {}


def record_verdict(number: int, passed: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
