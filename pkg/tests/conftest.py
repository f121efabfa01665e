"""Shared pytest plumbing: an acceptance-check report that survives output
capture, printed as its own section at the end of the run."""

import pytest

_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Append one result line per acceptance check; echoed after the run."""
    return _acceptance_lines.append


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance checks")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
