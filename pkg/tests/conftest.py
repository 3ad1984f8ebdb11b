"""Shared test fixtures and the acceptance-summary report.

Acceptance tests record one line per shipped performance contract; the
lines are printed in a terminal section after the run so the measured
values are visible whether or not the assertions passed.
"""

import pytest

_ACCEPTANCE_LINES: list[tuple[str, bool | None, str]] = []


def _record(name: str, ok: bool | None, detail: str) -> None:
    # ok=None marks a skipped check (missing optional input)
    _ACCEPTANCE_LINES.append((name, ok, detail))


@pytest.fixture(scope="session")
def acceptance_log():
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance summary")
    for name, ok, detail in _ACCEPTANCE_LINES:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{status:4s} {name}: {detail}")
