import pytest

from ensemble_bridge import make_family

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_log():
    """Collect one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def log(criterion, passed, detail):
        ACCEPTANCE_LINES.append(f"{criterion:<6} {'PASS' if passed else 'FAIL'}  {detail}")
    return log


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def brownian():
    return make_family("brownian", n_nodes=4)


@pytest.fixture(scope="session")
def scalar_theta():
    return make_family("scalar_theta_drift")


BUILTIN_CASES = [
    ("brownian", {"dim": 2}),
    ("scalar_theta_drift", {}),
    ("shifted_drift", {"dim": 2}),
    ("oscillator", {}),
    ("coupled_3x2", {}),
    ("rank_deficient", {}),
]
