import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Call as ``criterion(n, name, passed, detail)``; the line is echoed now
    and repeated in the terminal summary."""
    def record(number, name, passed, detail=""):
        line = f"criterion {number} {name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        print(line)
        _ACCEPTANCE_LINES.append((number, line))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
