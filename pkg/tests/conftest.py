"""Acceptance reporting: one [PASS]/[FAIL] line per criterion.

test_acceptance.py registers its criteria here as it runs; the terminal
summary reprints every line after the run so the verdicts stay visible
even though pytest captures in-test output. A criterion whose test died
before reporting shows up as a FAIL line rather than silence.
"""

EXPECTED: set = set()
LINES: dict = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(EXPECTED):
        line = LINES.get(n, f"[FAIL] criterion {n}: no result line "
                            f"(test crashed before reporting)")
        terminalreporter.write_line(line)
