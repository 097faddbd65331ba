import pytest

VERDICTS: dict = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; printed in the summary."""
    def record(number, name, passed, detail=""):
        VERDICTS[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'} {name}: {detail}"
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
