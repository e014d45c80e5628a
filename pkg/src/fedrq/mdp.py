"""Tabular MDPs, exact policy evaluation and (robust) Bellman backups.

Arrays follow one layout everywhere:

* ``kernel[s, a, s']`` is ``P(s' | s, a)``
* ``reward[s, a]`` lies in ``[0, 1]``
* ``q[s, a]`` is an action-value table
* ``policy[s, a]`` is ``pi(a | s)``

Neighbor sets are stored as a boolean matrix ``mask[s, s']`` that is true
when ``s'`` is a possible next state of ``s`` (see :mod:`fedrq.covering`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

SIMPLEX_TOL = 1e-9
FIXED_POINT_TOL = 1e-10
MAX_ITERATIONS = 10**6


class ConvergenceError(RuntimeError):
    """Raised when a fixed-point iteration hits its iteration cap."""


@dataclass
class TabularMDP:
    """A finite MDP ``<S, A, P, r, gamma>`` with initial distribution ``d0``.

    ``generator`` optionally records how the instance was built (kind and
    parameters) so that perturbed copies can be regenerated from it.
    """

    kernel: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    generator: dict[str, Any] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        self.kernel = np.asarray(self.kernel, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.discount = float(self.discount)
        if self.kernel.ndim != 3 or self.kernel.shape[0] != self.kernel.shape[2]:
            raise ValueError(f"kernel must have shape (S, A, S), got {self.kernel.shape}")
        if self.reward.shape != self.kernel.shape[:2]:
            raise ValueError(
                f"reward shape {self.reward.shape} does not match kernel {self.kernel.shape}"
            )
        if self.initial_dist.shape != (self.kernel.shape[0],):
            raise ValueError("initial_dist must be a vector over states")

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[1]

    def with_kernel(self, kernel: np.ndarray, generator: dict | None = None) -> "TabularMDP":
        """Copy of this MDP with a different transition kernel."""
        return TabularMDP(kernel, self.reward.copy(), self.discount, self.initial_dist.copy(), generator)


def validate_mdp(mdp: TabularMDP) -> list[str]:
    """Return every simplex/range violation of ``mdp``; empty iff valid."""
    problems = []
    k = mdp.kernel
    for s, a in np.argwhere((k < 0).any(axis=2)):
        problems.append(f"(s={s},a={a}): negative probability {k[s, a].min():.17g}")
    sums = k.sum(axis=2)
    for s, a in np.argwhere(np.abs(sums - 1.0) > SIMPLEX_TOL):
        problems.append(f"(s={s},a={a}): row sum {sums[s, a]:.17g}")
    r = mdp.reward
    for s, a in np.argwhere((r < 0) | (r > 1) | ~np.isfinite(r)):
        problems.append(f"(s={s},a={a}): reward out of [0,1]: {r[s, a]:.17g}")
    if not 0.0 < mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount} outside (0,1)")
    d0 = mdp.initial_dist
    if (d0 < 0).any() or abs(d0.sum() - 1.0) > SIMPLEX_TOL:
        problems.append(f"initial_dist is not a distribution (sum {d0.sum():.17g})")
    return problems


def _check_q(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"Q shape {q.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})")
    return q


def neighbor_min(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``out[..., s] = min over s' with mask[..., s, s'] of values[..., s']``.

    ``values`` has shape ``(..., S)`` and ``mask`` shape ``(..., S, S)``.
    """
    return np.where(mask, values[..., None, :], np.inf).min(axis=-1)


def robust_targets(
    kernel: np.ndarray,
    reward: np.ndarray,
    q: np.ndarray,
    gamma: float,
    omega: float,
    mask: np.ndarray | None,
) -> np.ndarray:
    """Robust optimality backup, batched over any leading axes.

    ``r + gamma * ((1 - omega) * P @ max_a q + omega * min_{N^s} max_a q)``.
    ``mask=None`` means the plain backup and requires ``omega == 0``.
    """
    v = q.max(axis=-1)
    expected = (kernel @ v[..., None, :, None])[..., 0]
    if mask is None:
        if omega != 0.0:
            raise ValueError("a neighbor mask is required when omega > 0")
        return reward + gamma * expected
    worst = neighbor_min(v, mask)
    return reward + gamma * ((1.0 - omega) * expected + omega * worst[..., None])


def bellman_optimality_apply(mdp: TabularMDP, q: np.ndarray) -> np.ndarray:
    """Standard optimality backup ``r + gamma * sum_s' P max_a' Q(s', a')``."""
    q = _check_q(mdp, q)
    return robust_targets(mdp.kernel, mdp.reward, q, mdp.discount, 0.0, None)


def _check_omega(omega: float) -> float:
    omega = float(omega)
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"omega must lie in [0, 1), got {omega}")
    return omega


def _check_mask(mask: np.ndarray, n_states: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_states, n_states):
        raise ValueError(f"neighbor mask must have shape ({n_states}, {n_states})")
    empty = np.flatnonzero(~mask.any(axis=1))
    if empty.size:
        raise ValueError(f"empty neighbor set for states {empty.tolist()}")
    return mask


def robust_bellman_apply(mdp: TabularMDP, q: np.ndarray, omega: float, neighbors: np.ndarray) -> np.ndarray:
    """Robust backup of one environment with robustness level ``omega``."""
    q = _check_q(mdp, q)
    omega = _check_omega(omega)
    mask = _check_mask(neighbors, mdp.n_states)
    return robust_targets(mdp.kernel, mdp.reward, q, mdp.discount, omega, mask)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic one-hot policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return pi


def _fixed_point(update, v0: np.ndarray, tol: float = FIXED_POINT_TOL, max_iter: int = MAX_ITERATIONS) -> np.ndarray:
    v = v0
    for _ in range(max_iter):
        v_new = update(v)
        if np.max(np.abs(v_new - v)) < tol:
            return v_new
        v = v_new
    raise ConvergenceError(f"no convergence to {tol} within {max_iter} iterations")


def policy_values(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """State values of ``policy`` by iterating ``V = r_pi + gamma P_pi V``."""
    policy = _check_q(mdp, policy)
    r_pi = (policy * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.kernel)
    gamma = mdp.discount
    return _fixed_point(lambda v: r_pi + gamma * (p_pi @ v), np.zeros(mdp.n_states))


def evaluate_policy_exact(mdp: TabularMDP, policy: np.ndarray) -> float:
    """Expected discounted return of ``policy`` from the initial distribution."""
    return float(mdp.initial_dist @ policy_values(mdp, policy))


def robust_policy_evaluation(
    mdp: TabularMDP,
    policy: np.ndarray,
    omega: float,
    neighbors: np.ndarray | None = None,
) -> np.ndarray:
    """Worst-case state values of ``policy`` over the covering set.

    ``mdp`` carries the average kernel. The adversary moves mass ``omega``
    onto the neighbor with the smallest value, which is where the infimum
    over the rectangular set is attained.
    """
    from .covering import compute_neighbors

    policy = _check_q(mdp, policy)
    omega = _check_omega(omega)
    mask = compute_neighbors(mdp.kernel) if neighbors is None else neighbors
    mask = _check_mask(mask, mdp.n_states)
    r_pi = (policy * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.kernel)
    gamma = mdp.discount

    def update(v):
        return r_pi + gamma * ((1.0 - omega) * (p_pi @ v) + omega * neighbor_min(v, mask))

    return _fixed_point(update, np.zeros(mdp.n_states))


def value_iteration(mdp: TabularMDP, tol: float = 1e-12, max_iter: int = MAX_ITERATIONS) -> np.ndarray:
    """Optimal Q table of ``mdp`` with certified residual below ``tol``."""
    gamma = mdp.discount
    step_tol = tol * (1.0 - gamma) / gamma
    return _fixed_point(lambda q: bellman_optimality_apply(mdp, q), np.zeros(mdp.reward.shape), step_tol, max_iter)
