import numpy as np
import pytest

from jointmc.discretize import LevelPartition


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_partition(rng, n, m):
    """Partition with every level populated and distinct values in [0, 1]."""
    assignment = np.concatenate([np.arange(m), rng.integers(0, m, n - m)])
    rng.shuffle(assignment)
    return LevelPartition(assignment, np.sort(rng.uniform(0, 1, m)))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
