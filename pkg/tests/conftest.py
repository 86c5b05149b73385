import pytest

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(capsys):
    """Record one acceptance criterion's outcome and print its pass/fail line."""

    def record(number: int, passed: bool, detail: str):
        _RESULTS[number] = (bool(passed), detail)
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
