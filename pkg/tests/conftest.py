import pytest

from degencontrol import DomainSpec, WeightSpec
from degencontrol.geometry import build_grid
from degencontrol.parabolic import ProblemSpec

_CRITERIA: dict = {}


def record_criterion(number: int, title: str, passed: bool, detail: str):
    _CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[k]
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")


@pytest.fixture(scope="session")
def domain():
    return DomainSpec()


@pytest.fixture(scope="session")
def grid33(domain):
    return build_grid(domain, 33)


@pytest.fixture(scope="session")
def grid17(domain):
    return build_grid(domain, 17)


@pytest.fixture(scope="session")
def problem17(domain):
    return ProblemSpec.build(domain, 17, WeightSpec("degenerate", 1.0), 1.0, 16, solver="direct")


@pytest.fixture(scope="session")
def problem33(domain):
    return ProblemSpec.build(domain, 33, WeightSpec("degenerate", 1.0), 1.0, 64, solver="direct")
