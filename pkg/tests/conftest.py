import pytest

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}
_TABLES: list[str] = []


@pytest.fixture
def acceptance():
    """Record an acceptance criterion outcome; printed in the terminal summary."""

    class Recorder:
        @staticmethod
        def result(number, passed, detail):
            _ACCEPTANCE[number] = (bool(passed), detail)

        @staticmethod
        def table(text):
            _TABLES.append(text)

    return Recorder


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE and not _TABLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    for text in _TABLES:
        terminalreporter.write_line("")
        for line in text.splitlines():
            terminalreporter.write_line(line)
