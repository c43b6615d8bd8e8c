"""Shared pytest plumbing: the acceptance verdict lines.

Each acceptance test records one PASS/FAIL line; they are echoed in the
terminal summary so the verdicts are visible without -s.
"""

VERDICTS = []


def record_verdict(number, ok, detail):
    VERDICTS.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("-", "acceptance verdicts")
    for line in sorted(VERDICTS):
        terminalreporter.write_line(line)
