"""Prints one PASS/FAIL/SKIP line per acceptance criterion at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker is not None and ("criterion", marker.args) not in item.user_properties:
        item.user_properties.append(("criterion", marker.args))


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _RESULTS[tuple(criterion)] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_RESULTS.items()):
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
