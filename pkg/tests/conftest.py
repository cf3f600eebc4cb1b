import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record one acceptance line; the summary at the end repeats them all."""

    def record(status, name, detail):
        line = f"{status} {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
