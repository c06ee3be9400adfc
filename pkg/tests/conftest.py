import re

import pytest

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")
_details: dict[int, str] = {}
_outcomes: dict[int, str] = {}


@pytest.fixture
def criterion_detail(request):
    """Callable storing a one-line summary for the running acceptance criterion."""
    n = int(_CRITERION.search(request.node.nodeid).group(1))

    def record(text):
        _details[n] = text

    return record


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.failed:
        _outcomes[n] = "FAIL"
    elif report.when == "call":
        _outcomes.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        terminalreporter.write_line(f"criterion {n:2d}: {_outcomes[n]}  {_details.get(n, '')}")
