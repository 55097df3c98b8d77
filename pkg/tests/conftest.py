import numpy as np
import pytest
import torch

from objstyle import datasets
from objstyle.features import get_extractor


@pytest.fixture(autouse=True)
def _no_env_weights(monkeypatch):
    monkeypatch.delenv("OBJSTYLE_VGG_WEIGHTS", raising=False)
    monkeypatch.delenv("OBJSTYLE_SCORERS", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def extractor():
    return get_extractor("random")


@pytest.fixture(scope="session")
def extractor64():
    return get_extractor("random", dtype=torch.float64)


@pytest.fixture(scope="session")
def small_instances():
    """32x32 renders of the three smoke scenes."""
    return {name: datasets.make_instance(name, size=32) for name in datasets.INSTANCES}


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("tests.test_acceptance")
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.summary_lines():
        terminalreporter.write_line(line)
