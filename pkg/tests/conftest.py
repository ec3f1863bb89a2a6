import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
