import numpy as np
import pytest
from hypothesis import settings

from fedrq.envgen import FamilySpec, make_garnet, perturb_family
from fedrq.mdp import TabularMDP

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


def random_mdp(rng, n_states=5, n_actions=3, gamma=0.8, sparse=False):
    kernel = rng.random((n_states, n_actions, n_states))
    if sparse:
        kernel *= rng.random(kernel.shape) < 0.5
        kernel[..., 0] += 1e-3
    kernel /= kernel.sum(axis=2, keepdims=True)
    reward = rng.random((n_states, n_actions))
    d0 = np.full(n_states, 1.0 / n_states)
    return TabularMDP(kernel, reward, gamma, d0)


def garnet_family(seed, n_states=8, n_actions=3, branching=3, gamma=0.8, noise=0.3,
                  n_agents=5, rate=0.5):
    base = make_garnet(n_states, n_actions, branching, gamma, seed, action_noise=noise)
    return perturb_family(FamilySpec(base, n_agents, rate, seed, "action_stochasticity"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
