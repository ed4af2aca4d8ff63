import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from transunmix.network import ModelConfig, init_params  # noqa: E402

TOY = dict(B=12, H=8, W=8, R=3, C=6, p=4, heads=2, n_encoders=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_config():
    return ModelConfig(**TOY, dropout_rate=0.0)


@pytest.fixture
def toy_params(toy_config, rng):
    return init_params(toy_config, seed=7, endmembers=rng.uniform(0.1, 0.9, (12, 3)))


@pytest.fixture
def toy_cube(rng):
    return rng.uniform(0.05, 0.9, (12, 8, 8))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
