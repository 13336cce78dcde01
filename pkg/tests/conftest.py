import pytest

_LINES: list[tuple[str, str]] = []


@pytest.fixture(scope="session")
def criterion_report():
    """Record a one-line outcome; all lines are printed in the terminal summary."""

    def record(label: str, ok: bool, detail: str):
        _LINES.append((label, f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
