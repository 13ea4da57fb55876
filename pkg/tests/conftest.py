import pytest

_RESULTS = {}


@pytest.fixture
def acceptance():
    """record(name, passed, detail): collects one line per acceptance criterion."""
    def record(name, passed, detail=""):
        line = f"{name} {'PASS' if passed else 'FAIL'}  {detail}"
        _RESULTS[name] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        terminalreporter.write_line(_RESULTS[name])
