import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tfczsl.data import synth_dataset  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy_dataset():
    return synth_dataset(num_classes=6, unseen_count=2, per_class=10, d_x=8, d_a=4, seed=0)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(num_classes=8, unseen_count=2, per_class=20, d_x=10, d_a=5,
                         noise_sigma=0.2, seed=3)


CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance line; printed now and again in the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
