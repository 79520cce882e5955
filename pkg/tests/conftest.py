import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
