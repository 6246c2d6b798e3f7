"""Shared test plumbing.

The acceptance tests append one verdict line per criterion to
ACCEPTANCE_LINES; the terminal-summary hook below prints them after the
normal pytest output so the full pass/fail picture survives output
capture.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
