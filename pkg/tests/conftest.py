import pytest

_LINES = []


@pytest.fixture
def criterion(capsys):
    """Report one PASS/FAIL line for an acceptance criterion and fail the test if it failed."""

    def report(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({name}): {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert passed, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
