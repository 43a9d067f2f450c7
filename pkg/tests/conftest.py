import pytest

_LINES = {}


@pytest.fixture
def acceptance():
    """Record the verdict line for one acceptance criterion."""

    def record(number: int, title: str, passed: bool, detail: str, runtime: float):
        verdict = "PASS" if passed else "FAIL"
        _LINES[number] = f"[{verdict}] criterion {number:>2} {title}: {detail} (runtime {runtime:.1f}s)"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
