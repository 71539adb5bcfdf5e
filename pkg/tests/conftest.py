import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance check.

    Usage: ``verdict(ok, detail)``; the line is printed in the terminal
    summary and the test fails when ``ok`` is false.
    """

    def record(ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {request.node.name}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
