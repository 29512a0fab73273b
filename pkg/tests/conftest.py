"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import pytest

_LINES = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(v for k, v in item.user_properties if k == "measured")
        status = "PASS" if report.passed else "FAIL"
        _LINES.append((marker.args[0], f"{status} criterion {marker.args[0]}: {marker.args[1]}"
                       + (f" [{detail}]" if detail else "")))


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
