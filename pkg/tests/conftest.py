import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pkg", max_examples=60, deadline=None)
settings.load_profile("pkg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One summary line per acceptance criterion, printed at the end of the run
# regardless of output capturing.
ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
