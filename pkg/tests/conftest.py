import pytest

from morphsoar.aerodynamics import calibrate_hover
from morphsoar.linearization import extract_constants
from morphsoar.morphology import build_design


@pytest.fixture(scope="session")
def hover_design():
    design, _ = calibrate_hover(build_design(), 10.0)
    return design


@pytest.fixture(scope="session")
def constants(hover_design):
    return extract_constants(hover_design, 10.0)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion and assert it."""
    def report(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
