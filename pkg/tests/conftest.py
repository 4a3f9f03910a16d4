import os

import numpy as np
import pytest
import torch

os.environ.setdefault("DAMAGEMAP_DEVICE", "cpu")
torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    from damagemap.synthetic import generate_scene

    return generate_scene(size=512, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
