import numpy as np
import pytest

from bimu.numkit import RngStream


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def np_rng():
    # independent generator for building test inputs
    return np.random.default_rng(20240917)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; printed again in the terminal summary."""

    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
