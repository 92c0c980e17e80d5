import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from relaycap.network import Network, synthetic_network

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_network() -> Network:
    # Two relays per class, capacities in kb/s.
    return Network.from_arrays(["guard", "guard", "middle", "middle", "exit", "exit"],
                               [4000.0, 2000.0, 1500.0, 1000.0, 1200.0, 800.0])


@pytest.fixture
def desk_network() -> Network:
    return synthetic_network({"guard": 8, "middle": 7, "exit": 5}, np.random.default_rng(11))


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
