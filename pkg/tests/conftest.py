import pytest

# filled by the acceptance tests; echoed once at the end of the run so the
# lines survive output capture
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


@pytest.fixture
def acceptance_line():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record
