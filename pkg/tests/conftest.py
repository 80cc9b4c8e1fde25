"""Shared pytest plumbing: acceptance verdicts are collected and reprinted at the end."""

import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """``verdict(n, passed, detail)`` records and prints one line for criterion ``n``."""

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        VERDICTS[n] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
