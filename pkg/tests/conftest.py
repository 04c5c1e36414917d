"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::(?:\w+::)?test_criterion_(\d+)_")
_outcomes: dict[int, list[bool]] = {}


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(int(match.group(1)), []).append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        verdict = "PASS" if all(_outcomes[number]) else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE criterion {number}: {verdict}")
