"""Covering-set construction around the average transition kernel.

The covering set at level ``omega`` contains, for every (s, a), the mixtures
``(1 - omega) * Pbar(.|s,a) + omega * q`` with ``q`` a distribution supported
on the neighbor set of ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MEMBERSHIP_TOL = 1e-12
CENTER_TOL = 1e-12


@dataclass
class CoveringSpec:
    omega: float
    neighbors: np.ndarray
    avg_kernel: np.ndarray

    def __post_init__(self) -> None:
        if not 0.0 <= self.omega < 1.0:
            raise ValueError(f"omega must lie in [0, 1), got {self.omega}")
        self.avg_kernel = np.asarray(self.avg_kernel, dtype=float)
        self.neighbors = np.asarray(self.neighbors, dtype=bool)

    @classmethod
    def from_kernels(cls, kernels, omega: float) -> "CoveringSpec":
        avg = average_kernel(kernels)
        return cls(float(omega), compute_neighbors(avg), avg)


@dataclass
class HeterogeneityReport:
    kappa: np.ndarray
    kappa_max: float
    feasible: bool

    def to_dict(self) -> dict:
        return {"kappa": self.kappa.tolist(), "kappa_max": self.kappa_max, "feasible": self.feasible}


def _stack(kernels) -> np.ndarray:
    kernels = [np.asarray(k, dtype=float) for k in kernels]
    if not kernels:
        raise ValueError("need at least one kernel")
    shape = kernels[0].shape
    for k in kernels[1:]:
        if k.shape != shape:
            raise ValueError(f"kernel shapes differ: {shape} vs {k.shape}")
    return np.stack(kernels)


def average_kernel(kernels) -> np.ndarray:
    """Entrywise mean of the agents' kernels, summed in agent order.

    Identical kernels are returned exactly (a plain mean could be off by
    rounding, which would show up as spurious heterogeneity).
    """
    stacked = _stack(kernels)
    if (stacked == stacked[0]).all():
        return stacked[0].copy()
    total = stacked[0].copy()
    for k in stacked[1:]:
        total += k
    return total / len(stacked)


def compute_neighbors(kernel: np.ndarray) -> np.ndarray:
    """``mask[s, s']`` is true iff ``sum_a P(s'|s,a) != 0``."""
    return np.asarray(kernel, dtype=float).sum(axis=1) != 0


def heterogeneity(kernels) -> HeterogeneityReport:
    """Smallest covering level per (s, a) that contains every agent's row.

    ``kappa(s,a) = max_k max_{s': Pbar > 0} (1 - P_k(s'|s,a) / Pbar(s'|s,a))``
    """
    stacked = _stack(kernels)
    avg = average_kernel(stacked)
    support = avg > 0
    ratio = np.divide(stacked, avg, out=np.ones_like(stacked), where=support)
    kappa = np.clip((1.0 - ratio).max(axis=(0, 3)), 0.0, 1.0)
    kappa_max = float(kappa.max())
    return HeterogeneityReport(kappa, kappa_max, kappa_max < 1.0)


def membership_check(kernel_k: np.ndarray, spec: CoveringSpec) -> bool:
    """True iff every row of ``kernel_k`` lies in the covering set of ``spec``.

    The row is decomposed as ``(1 - omega) * Pbar + omega * q`` and ``q`` is
    checked to be a distribution on the neighbor set. The check runs on
    ``omega * q`` so its tolerance is absolute in kernel units; dividing by a
    rounding-level ``omega`` would blow rounding noise up to order one.
    """
    kernel_k = np.asarray(kernel_k, dtype=float)
    if kernel_k.shape != spec.avg_kernel.shape:
        raise ValueError(f"kernel shape {kernel_k.shape} does not match {spec.avg_kernel.shape}")
    if spec.omega == 0.0:
        return bool(np.all(np.abs(kernel_k - spec.avg_kernel) <= CENTER_TOL))
    # omega * q, written so nothing cancels when omega is small
    mass = (kernel_k - spec.avg_kernel) + spec.omega * spec.avg_kernel
    if (mass < -MEMBERSHIP_TOL).any():
        return False
    if (np.abs(mass.sum(axis=2) - spec.omega) > MEMBERSHIP_TOL).any():
        return False
    outside = ~spec.neighbors[:, None, :]
    return bool(np.all(np.abs(np.where(outside, mass, 0.0)) <= MEMBERSHIP_TOL))


def check_assumption1(kernels) -> tuple[bool, list[int]]:
    """Whether all agents share every state's neighbor set.

    Returns the flag and the states whose neighbor sets disagree.
    """
    masks = np.stack([compute_neighbors(k) for k in _stack(kernels)])
    bad = np.flatnonzero((masks != masks[0]).any(axis=(0, 2)))
    return bad.size == 0, bad.tolist()
