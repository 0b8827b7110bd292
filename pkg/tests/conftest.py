from contextlib import contextmanager

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from afree.opsym import make_operator
from afree.spectral import Grid

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def curl22():
    return make_operator("curl", d=2, m=2)


@pytest.fixture(scope="session")
def grid17():
    return Grid(2, 17)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextmanager
    def record(number, title):
        try:
            yield
        except BaseException:
            lines.append(f"criterion {number}: FAIL  {title}")
            raise
        lines.append(f"criterion {number}: PASS  {title}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
