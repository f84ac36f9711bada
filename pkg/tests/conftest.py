import numpy as np
import pytest
from hypothesis import settings

from flowbank.bank import extract_transitions
from flowbank.systems import SamplingPlan, SystemSpec, generate_benchmark

# numba compiles on first call; wall-clock deadlines would be flaky
settings.register_profile("flowbank", deadline=None)
settings.load_profile("flowbank")


@pytest.fixture(scope="session")
def lorenz_trajectories():
    """The default benchmark: 20 Lorenz-63 trajectories of 812 points."""
    spec = SystemSpec("lorenz63")
    plan = SamplingPlan(spec.reference_lyapunov)
    return generate_benchmark(spec, plan, seed=0)


@pytest.fixture(scope="session")
def lorenz_bank(lorenz_trajectories):
    """Bank from the 312-point conditioning windows (M = 20 * 311)."""
    return extract_transitions([t.head(312) for t in lorenz_trajectories])


def random_bank(rng, M, d, spread=1.0):
    from flowbank.bank import TransitionBank
    x1 = rng.normal(scale=spread, size=(M, d))
    x2 = x1 + rng.normal(scale=0.3 * spread, size=(M, d))
    return TransitionBank(x1, x2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
