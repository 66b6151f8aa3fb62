import pytest

from selfheal.config import case_config

_acceptance_lines: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict line, printed in the terminal summary."""

    def record(number: int, ok: bool, detail: str) -> None:
        _acceptance_lines.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")

    return record


@pytest.fixture(scope="session")
def case5():
    return case_config(5)


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
