import pytest

from sfmac.fluid import derive_params


@pytest.fixture(scope="session")
def derived():
    return derive_params(0.25, 0.35)


@pytest.fixture(scope="session")
def a1(derived):
    return derived.protocol()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
