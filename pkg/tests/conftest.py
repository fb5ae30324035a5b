import numpy as np
import pytest
from hypothesis import settings

from resmasknet.model import build_network, default_spec, mini_spec
from resmasknet.tensor import Tensor, precision

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_net():
    return build_network(default_spec(), seed=0)


@pytest.fixture
def mini_net():
    return build_network(mini_spec(), seed=0)


def randt(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            for key, value in getattr(rep, "user_properties", ()):
                if key == "acceptance" and getattr(rep, "when", "call") == "call":
                    lines.append(value)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
