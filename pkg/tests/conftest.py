import sys

import numpy as np
import pytest

from depsnet import autodiff as ad
from depsnet.config import small_space
from depsnet.data import SyntheticDatasetSpec, load_dataset
from depsnet.rng import substream
from depsnet.supernet import SupernetWeights


@pytest.fixture(autouse=True)
def _fresh_tape():
    ad.reset_default_tape()
    yield
    ad.reset_default_tape()


@pytest.fixture
def space():
    return small_space()


@pytest.fixture
def weights(space):
    return SupernetWeights.init(space, substream(0, "init"))


@pytest.fixture(scope="session")
def tiny_data():
    return load_dataset(SyntheticDatasetSpec(num_classes=4, resolution=8, train_size=128,
                                             test_size=64, noise=1.0, seed=3))


@pytest.fixture
def batch(tiny_data):
    return next(tiny_data.train.batches(16))


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
