import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dglearn.data import BatchStream, synthetic_gaussians
from dglearn.greedy_net import build_partition, reference_channels

settings.register_profile(
    "dglearn", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("dglearn")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_task():
    """Small 4-class grating task on 8x8 images."""
    return synthetic_gaussians(classes=4, size=8, n=256, seed=3, noise=1.0, n_test=128)


def make_net(width=4, n_modules=4, size=8, classes=4, aux="mlp-aux", seed=0, dtype=np.float64):
    channels = reference_channels(width, n_modules, (1, 3))
    return build_partition(channels, classes, (3, size, size), (1, 3), n_modules, aux, seed, dtype)


@pytest.fixture
def net64():
    return make_net()


@pytest.fixture
def stream(tiny_task):
    return BatchStream(tiny_task.x_train.astype(np.float64), tiny_task.y_train, 32, seed=0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
