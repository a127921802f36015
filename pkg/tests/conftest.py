import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line(capsys):
    """Record one pass/fail line per criterion; echoed live and in the terminal summary."""

    def emit(text: str):
        _ACCEPTANCE_LINES.append(text)
        with capsys.disabled():
            print(f"\n{text}")

    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
