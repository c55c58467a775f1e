import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    from dynafuse.grid_core import GridSpec

    return GridSpec(-4.0, 4.0, -4.0, 4.0, 0.5)


# acceptance criteria report: one line per criterion at the end of the run
_CRITERIA: dict[int, str] = {}
_CRITERION_COUNT = 8


@pytest.fixture
def criterion(request):
    """Call ``record(n, ok, detail)`` once; the line is printed in the
    terminal summary. A test that dies before recording is listed as FAIL."""
    seen = []

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _CRITERIA[n] = line
        seen.append(n)
        print(line)
        return ok

    yield record
    if not seen:
        n = request.node.get_closest_marker("criterion").args[0]
        _CRITERIA[n] = f"FAIL criterion {n}: {request.node.name} did not finish"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, _CRITERION_COUNT + 1):
        terminalreporter.write_line(_CRITERIA.get(n, f"---- criterion {n}: not run"))
