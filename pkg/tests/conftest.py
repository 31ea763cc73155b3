import sys

import pytest

from relcheck.lang import parse
from relcheck.programs import path, source


@pytest.fixture(scope="session")
def jacobi():
    return parse(source("jacobi.mf"))


@pytest.fixture(scope="session")
def stencil2d():
    return parse(source("stencil2d.mf"))


@pytest.fixture(scope="session")
def jacobi_path():
    return str(path("jacobi.mf"))


@pytest.fixture(scope="session")
def stencil2d_path():
    return str(path("stencil2d.mf"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
