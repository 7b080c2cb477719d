import numpy as np
import pytest
from hypothesis import settings

from fe2net.network import FiberNetwork, NetworkSpec, generate_network

settings.register_profile("fe2net", max_examples=60, deadline=None)
settings.load_profile("fe2net")

#: acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def record(criterion: int, passed, detail: str = "") -> None:
    """Store the outcome of one acceptance criterion for the summary."""
    status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
    ACCEPTANCE[criterion] = (status, detail)
    print(f"criterion {criterion}: {status} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {status:4s} {detail}")


def two_fiber_net(area=1.0, modulus=1.0):
    """Two collinear fibers along x through a free centre node."""
    X = [[-0.5, 0, 0], [0, 0, 0], [0.5, 0, 0]]
    return FiberNetwork(np.array(X, float), [[0, 1], [1, 2]], area, modulus)


def single_fiber_net(area=1.0, modulus=1.0):
    return FiberNetwork(np.array([[-0.5, 0, 0], [0.5, 0, 0]]), [[0, 1]], area, modulus)


@pytest.fixture(scope="session")
def small_net():
    return generate_network(NetworkSpec(n_nodes=20, n_fibers=70), seed=3)


@pytest.fixture(scope="session")
def medium_net():
    return generate_network(NetworkSpec(n_nodes=50, n_fibers=150), seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
