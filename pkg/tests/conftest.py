import pytest

_LINES = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
