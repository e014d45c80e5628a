"""Compiled inner loop for expected-mode federated runs.

Mirrors ``federation._run_expected`` operation for operation; the two agree
to rounding (summation order of the expectation differs).
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None

AVAILABLE = njit is not None


def _expected_loop(kernels, reward, masks, nbr_idx, nbr_cnt, gamma, omega, robust, sync_interval,
                   total_steps, theorem, lr_const, oracle_q, has_oracle, record_every, keep_history):
    # nbr_idx[s, :nbr_cnt[s]] lists every s' any agent can reach from s; kernel
    # entries outside it are zero, so skipping them leaves every sum unchanged
    K, S, A, _ = kernels.shape
    n_rec = total_steps // record_every + total_steps // sync_interval + 2
    rec_t = np.zeros(n_rec, dtype=np.int64)
    rec_gap = np.full(n_rec, np.nan)
    rec_drift = np.zeros(n_rec)
    rec_agg = np.zeros(n_rec, dtype=np.bool_)
    hist = np.zeros((n_rec if keep_history else 0, S, A))
    q = np.zeros((K, S, A))
    q_bar = np.zeros((S, A))
    v = np.zeros((K, S))
    worst = np.zeros((K, S))
    # kernel rows packed onto the neighbor lists so the inner product is contiguous
    D = nbr_idx.shape[1]
    packed = np.zeros((K, S, A, D))
    for k in range(K):
        for s in range(S):
            for a in range(A):
                for j in range(nbr_cnt[s]):
                    packed[k, s, a, j] = kernels[k, s, a, nbr_idx[s, j]]
    v_nbr = np.zeros(D)

    n = 0
    rec_t[0] = 0
    if has_oracle:
        rec_gap[0] = np.max(np.abs(q_bar - oracle_q))
    if keep_history:
        hist[0] = q_bar
    n = 1

    for t in range(total_steps):
        if theorem:
            lam = 2.0 / ((1.0 - gamma) * (t + sync_interval))
        else:
            lam = lr_const
        for k in range(K):
            for s in range(S):
                best = q[k, s, 0]
                for a in range(1, A):
                    if q[k, s, a] > best:
                        best = q[k, s, a]
                v[k, s] = best
        if robust:
            for k in range(K):
                for s in range(S):
                    low = np.inf
                    for j in range(nbr_cnt[s]):
                        s2 = nbr_idx[s, j]
                        if masks[k, s, s2] and v[k, s2] < low:
                            low = v[k, s2]
                    worst[k, s] = low
        for k in range(K):
            for s in range(S):
                n_nbr = nbr_cnt[s]
                for j in range(n_nbr):
                    v_nbr[j] = v[k, nbr_idx[s, j]]
                for a in range(A):
                    expected = 0.0
                    for j in range(n_nbr):
                        expected += packed[k, s, a, j] * v_nbr[j]
                    if robust:
                        target = reward[s, a] + gamma * ((1.0 - omega) * expected + omega * worst[k, s])
                    else:
                        target = reward[s, a] + gamma * expected
                    q[k, s, a] = (1.0 - lam) * q[k, s, a] + lam * target

        step = t + 1
        aggregated = step % sync_interval == 0
        if aggregated or step % record_every == 0 or step == total_steps:
            for s in range(S):
                for a in range(A):
                    total = q[0, s, a]
                    for k in range(1, K):
                        total += q[k, s, a]
                    q_bar[s, a] = total / K
            drift = 0.0
            for k in range(K):
                dk = 0.0
                for s in range(S):
                    for a in range(A):
                        d = abs(q[k, s, a] - q_bar[s, a])
                        if d > dk:
                            dk = d
                drift += dk
            drift /= K
            if aggregated:
                for k in range(K):
                    for s in range(S):
                        for a in range(A):
                            q[k, s, a] = q_bar[s, a]
            rec_t[n] = step
            rec_drift[n] = drift
            rec_agg[n] = aggregated
            if has_oracle:
                gap = 0.0
                for s in range(S):
                    for a in range(A):
                        d = abs(q_bar[s, a] - oracle_q[s, a])
                        if d > gap:
                            gap = d
                rec_gap[n] = gap
            if keep_history:
                hist[n] = q_bar
            n += 1
    return q, rec_t[:n], rec_gap[:n], rec_drift[:n], rec_agg[:n], hist[:n] if keep_history else hist


def neighbor_lists(masks):
    """Padded index lists of the union of the agents' neighbor sets."""
    union = masks.any(axis=0)
    cnt = union.sum(axis=1).astype(np.int64)
    idx = np.zeros((union.shape[0], max(int(cnt.max()), 1)), dtype=np.int64)
    for s in range(union.shape[0]):
        nz = np.flatnonzero(union[s])
        idx[s, : nz.size] = nz
    return idx, cnt


if AVAILABLE:
    expected_loop = njit(cache=True)(_expected_loop)
else:  # pragma: no cover
    expected_loop = None
