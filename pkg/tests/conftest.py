import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from foliation_lab.foliation_core import make_chart
from foliation_lab.uniformization import LeafUniformization

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

BASE_POINT = np.array([0.3 + 0.2j, 0.4 - 0.1j])


@pytest.fixture(scope="session")
def product_chart():
    return make_chart("product", "kobayashi")


@pytest.fixture(scope="session")
def linear_chart():
    return make_chart("linear", "kobayashi")


@pytest.fixture(scope="session")
def product_leaf(product_chart):
    return LeafUniformization.build(product_chart, BASE_POINT)


@pytest.fixture(scope="session")
def linear_leaf(linear_chart):
    return LeafUniformization.build(linear_chart, BASE_POINT)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
