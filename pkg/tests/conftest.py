import numpy as np
import pytest

from drone_audition import _accel


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    if request.param == "numba" and not _accel.HAS_NUMBA:
        pytest.skip("numba not installed")
    before = _accel.USE_JIT
    _accel.USE_JIT = request.param == "numba"
    yield request.param
    _accel.USE_JIT = before


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, status, detail):
    ACCEPTANCE[number] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")
