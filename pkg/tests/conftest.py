"""Shared pytest hooks: collect one PASS/FAIL line per acceptance criterion."""
import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Call ``acceptance(number, title, passed, detail)`` once per criterion."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
