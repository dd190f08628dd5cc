import sys

import pytest

from episeg.config import Config
from episeg.data import build_dataset

TINY = {
    "data.classes": 8,
    "data.samples_per_class": 12,
    "data.image_size": 32,
    "data.seed": 1,
    "train.epochs": 1,
    "train.episodes_per_epoch": 8,
    "train.batch_size": 4,
    "csm.num_vectors": 10,
    "eval.episodes": 8,
    "eval.batch_size": 4,
}


@pytest.fixture(scope="session")
def tiny_config():
    return Config(TINY)


@pytest.fixture(scope="session")
def tiny_dataset():
    return build_dataset(num_classes=8, samples_per_class=12, image_size=32, seed=1)


@pytest.fixture(scope="session")
def default_dataset():
    return build_dataset()


def pytest_terminal_summary(terminalreporter):
    gate = sys.modules.get("test_acceptance")
    lines = getattr(gate, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
