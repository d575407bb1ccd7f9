import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("calm", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("calm")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
