from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "tests" / "data"
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def mnist_train_path():
    return DATA / "mnist5k-train-images-idx3-ubyte.gz"


@pytest.fixture(scope="session")
def mnist_test_path():
    return DATA / "mnist5k-test-images-idx3-ubyte.gz"


@pytest.fixture(scope="session")
def configs_dir():
    return CONFIGS


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one line each; printed together at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
