import pytest

_VERDICTS: list[tuple[str, str, bool, str]] = []


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion, then return the verdict."""
    def record(number: str, name: str, passed: bool, detail: str) -> bool:
        _VERDICTS.append((number, name, bool(passed), detail))
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}")
