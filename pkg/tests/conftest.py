import numpy as np
import pytest

from tacnn.model import ModelConfig, TaCNN


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(frames=8, joints=5, classes=3, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_config):
    return TaCNN(tiny_config, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
