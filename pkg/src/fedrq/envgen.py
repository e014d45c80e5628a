"""Environment generators and heterogeneous families.

All randomness comes from numpy's counter-based Philox generator. A stream
is addressed by a 128-bit key ``(seed ^ index, stream_tag)`` so per-agent
draws do not depend on the order in which agents are processed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .covering import check_assumption1
from .mdp import TabularMDP

PARAMS = ("slip_probability", "action_stochasticity")
_PARAM_KEYS = {"slip_probability": "slip", "action_stochasticity": "action_noise"}
CLAMP_LO, CLAMP_HI = 1e-6, 1.0 - 1e-6

STREAM_FAMILY = 0
STREAM_TRAINING = 1
STREAM_GARNET = 2
STREAM_EXPECTILE = 3

_MASK64 = (1 << 64) - 1

# north, east, south, west as (d_row, d_col)
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))


def make_rng(seed: int, index: int = 0, stream: int = 0) -> np.random.Generator:
    """Philox stream for ``(seed, index, stream)``; keyed by ``seed ^ index``."""
    key = np.array([(int(seed) ^ int(index)) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _apply_action_noise(kernel: np.ndarray, noise: float) -> np.ndarray:
    """With probability ``noise`` the executed action is uniform over all actions."""
    if noise == 0.0:
        return kernel
    return (1.0 - noise) * kernel + noise * kernel.mean(axis=1, keepdims=True)


def make_gridworld(
    width: int,
    height: int,
    slip: float,
    goal_reward: float = 1.0,
    gamma: float = 0.9,
    *,
    start: tuple[int, int] = (0, 0),
    goal: tuple[int, int] | None = None,
    pits: Sequence[tuple[int, int]] = (),
    action_noise: float = 0.0,
) -> TabularMDP:
    """Four-action grid with lateral slips and reflecting walls.

    Cells are ``(row, col)`` and state ``row * width + col``. Actions are
    north, east, south, west. The intended move happens with probability
    ``1 - slip``; otherwise one of the two perpendicular moves, each with
    ``slip / 2``. The goal is absorbing and pays ``goal_reward`` per step;
    pits are absorbing with zero reward. Play starts in ``start``.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise ValueError("grid must have at least two cells")
    if not 0.0 <= slip < 1.0:
        raise ValueError(f"slip must lie in [0, 1), got {slip}")
    if not 0.0 < goal_reward <= 1.0:
        raise ValueError(f"goal_reward must lie in (0, 1], got {goal_reward}")
    if not 0.0 <= action_noise <= 1.0:
        raise ValueError(f"action_noise must lie in [0, 1], got {action_noise}")
    goal = (height - 1, width - 1) if goal is None else tuple(goal)
    pits = [tuple(p) for p in pits]
    n = width * height

    def index(cell):
        r, c = cell
        if not (0 <= r < height and 0 <= c < width):
            raise ValueError(f"cell {cell} outside the {height}x{width} grid")
        return r * width + c

    g = index(goal)
    absorbing = {g, *(index(p) for p in pits)}
    if index(start) in absorbing:
        raise ValueError("start cell must not be absorbing")

    def move(r, c, a):
        dr, dc = MOVES[a]
        nr, nc = r + dr, c + dc
        if 0 <= nr < height and 0 <= nc < width:
            return nr * width + nc
        return r * width + c

    kernel = np.zeros((n, 4, n))
    for r in range(height):
        for c in range(width):
            s = r * width + c
            if s in absorbing:
                kernel[s, :, s] = 1.0
                continue
            for a in range(4):
                kernel[s, a, move(r, c, a)] += 1.0 - slip
                kernel[s, a, move(r, c, (a + 1) % 4)] += slip / 2.0
                kernel[s, a, move(r, c, (a + 3) % 4)] += slip / 2.0
    kernel = _apply_action_noise(kernel, action_noise)
    reward = np.zeros((n, 4))
    reward[g, :] = goal_reward
    d0 = np.zeros(n)
    d0[index(start)] = 1.0
    generator = {
        "kind": "gridworld",
        "width": width,
        "height": height,
        "slip": float(slip),
        "goal_reward": float(goal_reward),
        "gamma": float(gamma),
        "start": list(start),
        "goal": list(goal),
        "pits": [list(p) for p in pits],
        "action_noise": float(action_noise),
    }
    return TabularMDP(kernel, reward, gamma, d0, generator)


def make_garnet(
    n_states: int,
    n_actions: int,
    branching: int,
    gamma: float,
    seed: int,
    *,
    action_noise: float = 0.0,
) -> TabularMDP:
    """Random MDP: every (s, a) row has ``branching`` random successors.

    Successor masses are Dirichlet(1, ..., 1), rewards uniform on [0, 1] and
    the initial distribution uniform. Identical arguments give identical MDPs.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    if not 1 <= branching <= n_states:
        raise ValueError(f"branching must lie in [1, {n_states}], got {branching}")
    rng = make_rng(seed, 0, STREAM_GARNET)
    kernel = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            masses = rng.dirichlet(np.ones(branching))
            kernel[s, a, succ] = masses if branching > 1 else 1.0
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    kernel = _apply_action_noise(kernel, action_noise)
    generator = {
        "kind": "garnet",
        "n_states": n_states,
        "n_actions": n_actions,
        "branching": branching,
        "gamma": float(gamma),
        "seed": int(seed),
        "action_noise": float(action_noise),
    }
    return TabularMDP(kernel, reward, gamma, np.full(n_states, 1.0 / n_states), generator)


def build(generator: dict) -> TabularMDP:
    """Rebuild an MDP from its recorded generator parameters."""
    params = dict(generator)
    kind = params.pop("kind", None)
    if kind == "gridworld":
        for key in ("start", "goal"):
            params[key] = tuple(params[key])
        params["pits"] = [tuple(p) for p in params.get("pits", ())]
        return make_gridworld(**params)
    if kind == "garnet":
        return make_garnet(**params)
    raise ValueError(f"unknown generator kind {kind!r}")


def _param_key(base: TabularMDP, param: str) -> str:
    if param not in _PARAM_KEYS:
        raise ValueError(f"unknown perturbation parameter {param!r}; expected one of {PARAMS}")
    if base.generator is None:
        raise ValueError("base MDP carries no generator record and cannot be perturbed")
    key = _PARAM_KEYS[param]
    if key not in base.generator:
        raise ValueError(f"{base.generator.get('kind')} environments have no {param}")
    return key


def _upper(key: str) -> float:
    # slip must stay below 1; action noise may reach 1
    return 1.0 if key == "action_noise" else np.nextafter(1.0, 0.0)


def with_parameter(base: TabularMDP, param: str, value: float) -> TabularMDP:
    """Regenerate ``base`` with one model parameter replaced."""
    key = _param_key(base, param)
    if not 0.0 <= value <= _upper(key):
        raise ValueError(f"{param} = {value} is outside its valid range")
    return build({**base.generator, key: float(value)})


@dataclass
class FamilySpec:
    base: TabularMDP
    n_agents: int
    perturbation_rate: float
    seed: int
    perturb_param: str = "slip_probability"

    def __post_init__(self) -> None:
        if self.n_agents < 1:
            raise ValueError("n_agents must be positive")
        if not 0.0 <= self.perturbation_rate < 1.0:
            raise ValueError(f"perturbation_rate must lie in [0, 1), got {self.perturbation_rate}")
        if self.perturb_param not in PARAMS:
            raise ValueError(f"perturb_param must be one of {PARAMS}")


@dataclass
class EnvFamily:
    """K environments sharing states, actions, rewards and discount."""

    members: list[TabularMDP]
    factors: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    clamped: list[int] = field(default_factory=list)
    param: str | None = None
    nominal: float | None = None
    seed: int | None = None
    perturbation_rate: float | None = None

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("a family needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.kernel.shape != first.kernel.shape:
                raise ValueError("family members must share state and action spaces")
            if not np.array_equal(m.reward, first.reward) or m.discount != first.discount:
                raise ValueError("family members must share reward table and discount")

    @property
    def n_agents(self) -> int:
        return len(self.members)

    @property
    def kernels(self) -> np.ndarray:
        return np.stack([m.kernel for m in self.members])

    @property
    def discount(self) -> float:
        return self.members[0].discount

    @property
    def reward(self) -> np.ndarray:
        return self.members[0].reward

    def average_mdp(self) -> TabularMDP:
        """The virtual MDP with the averaged kernel."""
        from .covering import average_kernel

        return self.members[0].with_kernel(average_kernel(self.kernels))


def perturb_family(spec: FamilySpec) -> EnvFamily:
    """Draw ``n_k ~ U(-p, p)`` per agent and rebuild with ``m_k = m (1 + n_k)``.

    ``m_k`` is clamped into ``[1e-6, 1 - 1e-6]`` so every member keeps the same
    support; clamped agents are listed in ``EnvFamily.clamped``.
    """
    base, p = spec.base, spec.perturbation_rate
    key = _param_key(base, spec.perturb_param)
    m = float(base.generator[key])
    if m * (1.0 + p) >= 1.0:
        raise ValueError(f"{spec.perturb_param} {m} leaves [0, 1) under perturbation rate {p}")
    factors, values, clamped, members = [], [], [], []
    for k in range(spec.n_agents):
        if p == 0:
            # identical copies already share supports
            factors.append(0.0)
            values.append(m)
            members.append(base)
            continue
        n_k = float(make_rng(spec.seed, k, STREAM_FAMILY).uniform(-p, p))
        m_k = m * (1.0 + n_k)
        if not CLAMP_LO <= m_k <= CLAMP_HI:
            m_k = min(max(m_k, CLAMP_LO), CLAMP_HI)
            clamped.append(k)
        factors.append(n_k)
        values.append(m_k)
        members.append(build({**base.generator, key: m_k}))
    family = EnvFamily(members, factors, values, clamped, spec.perturb_param, m, spec.seed, p)
    ok, bad = check_assumption1(family.kernels)
    if not ok:
        raise ValueError(f"generated family violates support consistency at states {bad}")
    return family


def perturbed_test_suite(base: TabularMDP, param: str, factors: Sequence[float]) -> list[TabularMDP]:
    """One environment per factor with the parameter scaled to ``factor * m``."""
    key = _param_key(base, param)
    m = float(base.generator[key])
    suite = []
    for f in factors:
        if f == 1.0:
            suite.append(base)
        else:
            suite.append(with_parameter(base, param, m * f))
    return suite
