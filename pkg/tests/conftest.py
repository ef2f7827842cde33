"""Collects acceptance verdicts and prints them at the end of the run."""

import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        _VERDICTS[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        print(_VERDICTS[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        terminalreporter.write_line(_VERDICTS[number])
