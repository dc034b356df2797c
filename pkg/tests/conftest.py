"""Collects the acceptance verdicts and prints them after the run."""

import pytest

VERDICTS: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict():
    """Call ``verdict(n, title, ok, detail)`` once per acceptance criterion."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        VERDICTS[number] = (title, bool(ok), detail)
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}")
