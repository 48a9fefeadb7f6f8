import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MNIST_DIR = os.environ.get("LYSEP_MNIST_DIR", "/root/data/mnist")


def mnist_available():
    return all(
        os.path.exists(os.path.join(MNIST_DIR, f"{p}-{k}-idx{d}-ubyte"))
        for p in ("train",)
        for k, d in (("images", 3), ("labels", 1))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set LYSEP_MNIST_DIR)")
    return MNIST_DIR


# One summary line per acceptance criterion, printed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
