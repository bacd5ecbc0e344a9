import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmsformer import tensor as T  # noqa: E402


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled by test_acceptance.py and echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
