import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dcpf.element_dist import ElementDistribution
from dcpf.synthetic import sample_dataset

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def small_data():
    rng = np.random.default_rng(3)
    syn = sample_dataset(25, 20, 3, ElementDistribution.from_p("geo", 0.6), rng, shape=0.5, rate=0.7)
    return syn.data
