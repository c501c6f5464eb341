"""Collects one pass/fail verdict per acceptance criterion and prints them at the end."""

import pytest

_verdicts = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n = mark.args[0]
    ok = report.passed and not report.skipped
    prev = _verdicts.get(n, (True, []))
    _verdicts[n] = (prev[0] and ok, prev[1] + [item.name] if not ok else prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, failed = _verdicts[n]
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f"  ({', '.join(dict.fromkeys(failed))})"
        terminalreporter.write_line(line)
