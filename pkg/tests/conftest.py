import pytest

# (criterion number, passed, text) collected by the acceptance suite
ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, text: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"
    ACCEPTANCE_LINES.append((number, passed, line))
    print(line)


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(line)
