import pytest

_LINES: dict = {}


@pytest.fixture
def criterion():
    """Record a one-line verdict for an acceptance criterion."""

    def report(key, ok, detail):
        line = f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[key] = line
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES, key=lambda k: (int(str(k).rstrip("abc")), str(k))):
        terminalreporter.write_line(_LINES[key])
