import time

import pytest

ACCEPTANCE: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, limit): numbered acceptance check with a runtime limit in seconds")


@pytest.fixture
def verdict(request):
    """Record one acceptance line; call as ``verdict(ok, detail)`` at the end of the test.

    The runtime against the marker's limit is folded into the verdict.
    """
    mark = request.node.get_closest_marker("criterion")
    n, limit = mark.args
    t0 = time.perf_counter()

    def record(ok, detail):
        dt = time.perf_counter() - t0
        ok = bool(ok) and dt < limit
        ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{dt:.1f}s / {limit}s]"
        print(ACCEPTANCE[n])
        assert dt < limit, f"runtime {dt:.1f}s exceeds {limit}s"
        return ok

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and rep.failed and call.when == "call":
        n = mark.args[0]
        line = ACCEPTANCE.get(n, f"criterion {n:2d}: FAIL  {call.excinfo.typename}")
        ACCEPTANCE[n] = line.replace("PASS", "FAIL", 1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
