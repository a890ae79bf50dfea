import numpy as np
import pytest

from ovsmc.models import LinearGaussian, StochasticVolatility


@pytest.fixture
def lg1d():
    """The 1-D linear Gaussian benchmark with informative observations."""
    model = LinearGaussian(1, 1)
    return model, model.pack(0.8, 1.0, 0.5, 0.2)


@pytest.fixture
def lg2d():
    model = LinearGaussian(2, 2)
    theta = model.pack(
        [[0.5, 0.1], [-0.2, 0.4]],
        [[1.0, 0.3], [0.0, 0.8]],
        [[0.7, 0.1], [0.0, 0.5]],
        [[0.4, -0.1], [0.0, 0.6]],
    )
    return model, theta


@pytest.fixture
def sv():
    model = StochasticVolatility()
    return model, model.pack(0.975, 0.165, 0.641)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one status line per acceptance criterion for the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
