import pytest

_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Callable ``(number, ok, detail)`` that records one acceptance line."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
