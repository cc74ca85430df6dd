import numpy as np
import pytest

from ipsim.models import custom_model, opinion_model

OPINION_P = np.array([[0.0, 0.7, 0.3], [0.5, 0.0, 0.5], [0.2, 0.8, 0.0]])
OPINION_Q = np.array([[0.0, 0.6, 0.4], [0.3, 0.0, 0.7], [0.5, 0.5, 0.0]])
OPINION_NU0 = np.array([0.5, 0.3, 0.2])

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def opinion():
    return opinion_model(1.0, 1.0, OPINION_P, OPINION_Q, 1)


def mixed_two_state():
    """Two types with both single-agent flips and pair interactions."""
    G = np.zeros((2, 2, 2))
    G[0, :, 1] = 0.6
    G[1, :, 0] = 0.4
    L = np.zeros((2,) * 5)
    L[0, 1, :, 1, 1] = 0.5
    L[1, 1, :, 1, 0] = 0.3
    return custom_model(["0", "1"], G, L)


@pytest.fixture
def mixed():
    return mixed_two_state()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
