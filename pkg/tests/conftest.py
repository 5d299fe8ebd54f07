import sys

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one CRITERION pass/fail line and assert its outcome.

    Lines are echoed in the terminal summary so they stay visible under
    output capture.
    """
    def report(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} — {detail}"
        print(line, file=sys.__stdout__, flush=True)
        ACCEPTANCE_LINES.append(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
