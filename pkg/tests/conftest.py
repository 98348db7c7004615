import sys

import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, line = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {line}")


@pytest.fixture
def record_criterion(request):
    """Yields a dict for details; stores PASS/FAIL plus the details once the test finishes."""
    marker = request.node.get_closest_marker("acceptance")
    info = {"detail": ""}
    yield info
    mod = sys.modules[request.module.__name__]
    rep = getattr(request.node, "rep_call", None)
    ok = rep is not None and rep.passed
    mod.RESULTS[marker.args[0]] = (ok, f"{marker.args[1]} {info['detail']}".strip())


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep
