"""Shared pytest hooks: one verdict line per acceptance criterion."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    """Record a check under ``criterion``; a criterion passes when all its checks do."""

    def record(criterion, passed, detail=""):
        VERDICTS.setdefault(criterion, []).append((bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(VERDICTS):
        checks = VERDICTS[criterion]
        passed = all(p for p, _ in checks)
        detail = "; ".join(d for _, d in checks if d)
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
