from __future__ import annotations

import pytest

_LINES: list[str] = []


class Reporter:
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def __call__(self, number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)
        return ok


@pytest.fixture(scope="session")
def report():
    return Reporter()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
