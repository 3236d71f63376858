"""Shared test configuration: hypothesis profile and the acceptance report.

The acceptance tests (tests/test_acceptance.py) append one PASS/FAIL line
per criterion to a session-wide list; the terminal-summary hook prints the
collected lines after the run so they are visible even under pytest's
default output capture.
"""

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def criterion_report(request):
    lines = getattr(request.config, "_criterion_lines", None)
    if lines is None:
        lines = []
        request.config._criterion_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
