"""Evaluation of learned policies across local and perturbed environments."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envgen import EnvFamily, make_rng
from .mdp import TabularMDP, evaluate_policy_exact


@dataclass
class EvalReport:
    returns: list[float]
    average: float
    minimum: float
    argmin: int

    @classmethod
    def from_returns(cls, returns: Sequence[float]) -> "EvalReport":
        returns = [float(x) for x in returns]
        if not returns:
            raise ValueError("no returns to summarize")
        arr = np.array(returns)
        return cls(returns, float(arr.mean()), float(arr.min()), int(arr.argmin()))

    def to_csv(self) -> str:
        return rows_to_csv(("env_index", "return"), enumerate(self.returns))


def rollout_return(mdp: TabularMDP, policy: np.ndarray, episodes: int = 1000,
                   horizon: int = 500, seed: int = 0) -> float:
    """Monte-Carlo estimate of the discounted return, truncated at ``horizon``."""
    rng = make_rng(seed, 0, 7)
    total = 0.0
    pcdf = np.cumsum(policy, axis=1)
    kcdf = np.cumsum(mdp.kernel, axis=2)
    dcdf = np.cumsum(mdp.initial_dist)
    last = mdp.n_states - 1
    for _ in range(episodes):
        s = min(int(np.searchsorted(dcdf, rng.random(), side="right")), last)
        disc, ret = 1.0, 0.0
        for _ in range(horizon):
            a = min(int(np.searchsorted(pcdf[s], rng.random(), side="right")), mdp.n_actions - 1)
            ret += disc * mdp.reward[s, a]
            disc *= mdp.discount
            s = min(int(np.searchsorted(kcdf[s, a], rng.random(), side="right")), last)
        total += ret
    return total / episodes


def _value(mdp, policy, method, episodes, seed):
    if method == "exact":
        return evaluate_policy_exact(mdp, policy)
    if method == "rollout":
        return rollout_return(mdp, policy, episodes, seed=seed)
    raise ValueError(f"unknown evaluation method {method!r}")


def evaluate_on_family(policy: np.ndarray, family: EnvFamily, method: str = "exact",
                       episodes: int = 1000, seed: int = 0) -> EvalReport:
    """Return of ``policy`` in every member environment, with mean and minimum."""
    policy = np.asarray(policy, dtype=float)
    if policy.shape != family.reward.shape:
        raise ValueError(f"policy shape {policy.shape} does not match {family.reward.shape}")
    return EvalReport.from_returns(_value(m, policy, method, episodes, seed) for m in family.members)


def robustness_sweep(policy: np.ndarray, suite: Sequence[TabularMDP], factors: Sequence[float] | None = None,
                     method: str = "exact", episodes: int = 1000, seed: int = 0) -> list[tuple[float, float]]:
    """``(factor, return)`` per suite environment, ordered by factor."""
    if not suite:
        raise ValueError("empty test suite")
    factors = list(range(len(suite))) if factors is None else list(factors)
    if len(factors) != len(suite):
        raise ValueError("one factor per suite environment is required")
    points = [(float(f), _value(m, policy, method, episodes, seed)) for f, m in zip(factors, suite)]
    return sorted(points, key=lambda p: p[0])


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format(x, ".17g") if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def sweep_to_csv(points) -> str:
    return rows_to_csv(("factor", "return"), points)
