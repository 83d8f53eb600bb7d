import pytest

from mmrev.model import ModelParams, scale_params

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def medium_a() -> ModelParams:
    return ModelParams(A=2.0, kappa=1.5, gamma=2.0, sigma=0.4, mu=1.0, alpha=1.0, T=10.0)


@pytest.fixture
def medium_a_scaled(medium_a):
    return scale_params(medium_a)
