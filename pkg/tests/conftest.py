import os
import sys

import pytest

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.services.hybrid_service import simulate  # noqa: E402
from app.services.scenario_service import bouncing_ball, dissipative_oscillator  # noqa: E402


@pytest.fixture(scope="session")
def ball():
    return bouncing_ball()


@pytest.fixture(scope="session")
def oscillator():
    return dissipative_oscillator()


@pytest.fixture(scope="session")
def ball_reference(ball):
    return simulate(ball.system, ball.reference_x0, ball.t0, ball.horizon, limits=ball.limits)


@pytest.fixture(scope="session")
def oscillator_reference(oscillator):
    return simulate(oscillator.system, oscillator.reference_x0, oscillator.t0, oscillator.horizon, limits=oscillator.limits)
