import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from poisonprobe._runtime import keep_heap_warm  # noqa: E402
from poisonprobe.architecture import ArchitectureSpec, Conv, Dense, MaxPool, SoftmaxHead  # noqa: E402
from poisonprobe.data import synth_generate  # noqa: E402

keep_heap_warm()


def pytest_addoption(parser):
    parser.addoption("--skip-acceptance", action="store_true", help="skip the long acceptance run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--skip-acceptance"):
        skip = pytest.mark.skip(reason="--skip-acceptance")
        for item in items:
            if "acceptance" in item.keywords:
                item.add_marker(skip)


@pytest.fixture
def tiny_spec():
    return ArchitectureSpec((6, 6, 2), (Conv(3, 3, 3), MaxPool(2, 2), Dense(5), SoftmaxHead(4)), name="tiny")


@pytest.fixture(scope="session")
def synth_small():
    return synth_generate(10, 30, geometry_seed=3, noise_seed=11, name="train")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
