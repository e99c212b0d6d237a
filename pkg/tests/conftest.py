import pytest

from wconv import _kernels

BACKENDS = [b for b in _kernels.BACKENDS if b != "numba" or _kernels.HAVE_NUMBA]


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per available kernel backend."""
    prev = _kernels.set_backend(request.param)
    yield request.param
    _kernels.set_backend(prev)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
