"""Ground truth for the federated runs: the averaged robust operator, its
fixed point, and the convergence bound the global Q table must respect."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covering import average_kernel, check_assumption1, compute_neighbors
from .envgen import EnvFamily
from .mdp import MAX_ITERATIONS, ConvergenceError, greedy_policy, robust_targets

GAMMA_RANGE = (0.2, 1.0)


class AssumptionError(ValueError):
    """The family's agents disagree on some state's neighbor set."""


@dataclass
class OracleResult:
    q_star: np.ndarray
    v_star: np.ndarray
    pi_star: np.ndarray
    iterations: int
    residual: float
    omega: float = 0.0

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "iterations": self.iterations,
            "residual": self.residual,
            "q_star": self.q_star.tolist(),
            "v_star": self.v_star.tolist(),
            "pi_star": self.pi_star.argmax(axis=1).tolist(),
        }


def _require_consistent(family: EnvFamily) -> None:
    ok, bad = check_assumption1(family.kernels)
    if not ok:
        raise AssumptionError(f"agents disagree on the neighbor sets of states {bad}")


def mean_robust_bellman_apply(family: EnvFamily, q: np.ndarray, omega: float) -> np.ndarray:
    """Robust backup built from the average kernel and its neighbor sets."""
    _require_consistent(family)
    if not 0.0 <= omega < 1.0:
        raise ValueError(f"omega must lie in [0, 1), got {omega}")
    avg = average_kernel(family.kernels)
    mask = compute_neighbors(avg) if omega > 0 else None
    return robust_targets(avg, family.reward, np.asarray(q, dtype=float), family.discount, omega, mask)


def robust_q_star(
    family: EnvFamily,
    omega: float,
    tol: float = 1e-10,
    q0: np.ndarray | None = None,
    max_iter: int = MAX_ITERATIONS,
) -> OracleResult:
    """Iterate the averaged robust operator to its fixed point.

    Stops once the step change drops below ``tol * (1 - gamma) / gamma``,
    which certifies ``||T Q - Q||_inf <= tol`` for the returned table.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    _require_consistent(family)
    gamma = family.discount
    avg = average_kernel(family.kernels)
    mask = compute_neighbors(avg) if omega > 0 else None
    reward = family.reward
    step_tol = tol * (1.0 - gamma) / gamma
    q = np.zeros(reward.shape) if q0 is None else np.array(q0, dtype=float)
    for it in range(1, max_iter + 1):
        q_new = robust_targets(avg, reward, q, gamma, omega, mask)
        change = float(np.max(np.abs(q_new - q)))
        q = q_new
        if change < step_tol:
            residual = float(np.max(np.abs(robust_targets(avg, reward, q, gamma, omega, mask) - q)))
            return OracleResult(q, q.max(axis=1), greedy_policy(q), it, residual, float(omega))
    raise ConvergenceError(f"robust value iteration did not reach {tol} in {max_iter} iterations")


def _check_theorem_range(gamma: float, sync_interval: int) -> None:
    lo, hi = GAMMA_RANGE
    if not lo <= gamma < hi:
        raise ValueError(f"the convergence bound needs gamma in [{lo}, {hi}), got {gamma}")
    if sync_interval <= 1:
        raise ValueError(f"the convergence bound needs a sync interval E > 1, got {sync_interval}")


def theorem1_bound(gamma: float, sync_interval: int, t) -> np.ndarray | float:
    """``16 gamma (E - 1) / ((1 - gamma)^3 (t + E))``; vectorized over ``t``."""
    _check_theorem_range(gamma, sync_interval)
    t = np.asarray(t, dtype=float)
    if (t < 0).any():
        raise ValueError("t must be nonnegative")
    bound = 16.0 * gamma * (sync_interval - 1) / ((1.0 - gamma) ** 3 * (t + sync_interval))
    return float(bound) if bound.ndim == 0 else bound


def drift_bound(gamma: float, sync_interval: int, t) -> np.ndarray | float:
    """Bound on the mean agent drift from the global table, ``4 lambda_t (E-1) / (1-gamma)``."""
    from .federation import lr_schedule

    return 4.0 * lr_schedule(t, gamma, sync_interval) * (sync_interval - 1) / (1.0 - gamma)


@dataclass
class VerificationReport:
    t: np.ndarray
    gap: np.ndarray
    bound: np.ndarray
    violations: list[int]
    final_gap: float
    final_gap_tol: float
    passed: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_recorded": int(self.t.size),
            "n_violations": len(self.violations),
            "first_violations": self.violations[:20],
            "final_gap": self.final_gap,
            "final_gap_tol": self.final_gap_tol,
            "max_gap_to_bound_ratio": float(np.max(self.gap / self.bound)) if self.t.size else 0.0,
            "notes": self.notes,
        }


def verify_convergence(trace, oracle: OracleResult, gamma: float, sync_interval: int,
                       final_gap_tol: float = 1e-4) -> VerificationReport:
    """Check ``gap_t <= bound_t`` at every recorded step and a small final gap.

    Gaps are recomputed against ``oracle`` when the trace stored global
    tables. Otherwise the trace's gap column is used; if it was recorded
    against a different table (at sup distance ``delta``), ``|gap - delta|``
    is used instead, a lower bound on the true gap, so every reported
    violation is genuine. The final gap always comes from ``q_final``.
    """
    t = np.asarray(trace.t)
    gap = np.asarray(trace.sup_gap, dtype=float)
    notes = []
    recorded_against = getattr(trace, "oracle_q", None)
    if trace.q_history is not None and len(trace.q_history):
        gap = np.max(np.abs(trace.q_history - oracle.q_star), axis=(1, 2))
    elif np.isnan(gap).any():
        notes.append("trace has no gap data against an oracle")
    elif recorded_against is not None and not np.array_equal(recorded_against, oracle.q_star):
        delta = float(np.max(np.abs(recorded_against - oracle.q_star)))
        gap = np.abs(gap - delta)
        notes.append(f"trace gaps were recorded against another table (distance {delta:.3e}); "
                     "intermediate gaps are lower bounds")
    if gap.size:
        gap = gap.copy()
        gap[-1] = float(np.max(np.abs(np.asarray(trace.q_final) - oracle.q_star)))
    bound = np.asarray(theorem1_bound(gamma, sync_interval, t), dtype=float)
    violations = t[~(gap <= bound)].tolist()
    final_gap = float(gap[-1]) if gap.size else float("nan")
    passed = not violations and final_gap <= final_gap_tol
    if final_gap > final_gap_tol:
        notes.append(f"final gap {final_gap:.3e} above tolerance {final_gap_tol:.1e}")
    return VerificationReport(t, gap, bound, violations, final_gap, final_gap_tol, passed, notes)
