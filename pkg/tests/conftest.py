import sys


def pytest_terminal_summary(terminalreporter, exitstatus):
    """Echo the acceptance verdict lines after the test summary.

    The acceptance tests record one PASS/FAIL line each; pytest's fd-level
    capture would otherwise hide them on fully green runs.
    """
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(module, "VERDICT_LINES", None)
    if lines:
        terminalreporter.section("acceptance verdicts")
        for line in lines:
            terminalreporter.write_line(line)
