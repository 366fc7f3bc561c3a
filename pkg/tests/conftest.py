import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from structprune.data import make_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def tiny_data():
    """100 train / 50 test synthetic images; enough to exercise loops, not to learn."""
    return make_synthetic(10, 10, 32, seed=0, test_per_class=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES
