import pytest

_CRITERIA: dict[int, str] = {}
_NOTES: list[str] = []


@pytest.fixture
def record_criterion():
    """Store a one-line PASS/FAIL verdict; the lines are printed after the run."""

    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


@pytest.fixture
def record_note():
    """Extra lines (e.g. benchmark tables) shown after the verdicts."""
    return _NOTES.extend


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
    if _NOTES:
        terminalreporter.section("benchmark")
        for line in _NOTES:
            terminalreporter.write_line(line)
