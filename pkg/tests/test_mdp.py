import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedrq.covering import compute_neighbors
from fedrq.envgen import make_rng
from fedrq.mdp import (ConvergenceError, TabularMDP, _fixed_point, bellman_optimality_apply,
                       evaluate_policy_exact, greedy_policy, policy_values, robust_bellman_apply,
                       robust_policy_evaluation, validate_mdp, value_iteration)

from conftest import random_mdp


def one_state(reward=1.0, gamma=0.5):
    return TabularMDP(np.ones((1, 1, 1)), np.full((1, 1), reward), gamma, np.ones(1))


def brute_robust_backup(mdp, q, omega, mask):
    """Loop-by-loop reference for the robust backup."""
    S, A = q.shape
    v = [max(q[s]) for s in range(S)]
    out = np.zeros_like(q)
    for s in range(S):
        worst = min(v[t] for t in range(S) if mask[s, t])
        for a in range(A):
            exp = sum(mdp.kernel[s, a, t] * v[t] for t in range(S))
            out[s, a] = mdp.reward[s, a] + mdp.discount * ((1 - omega) * exp + omega * worst)
    return out


class TestValidate:
    def test_valid_two_state(self):
        mdp = TabularMDP(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 0.9, np.array([1.0, 0.0]))
        assert validate_mdp(mdp) == []

    def test_row_sum(self):
        k = np.full((2, 1, 2), 0.5)
        k[0, 0] = [0.6, 0.6]
        problems = validate_mdp(TabularMDP(k, np.zeros((2, 1)), 0.9, np.array([1.0, 0.0])))
        assert len(problems) == 1 and "row sum 1.2" in problems[0]

    def test_reward_range(self):
        r = np.zeros((2, 1))
        r[1, 0] = 1.5
        problems = validate_mdp(TabularMDP(np.full((2, 1, 2), 0.5), r, 0.9, np.array([1.0, 0.0])))
        assert len(problems) == 1 and "reward out of [0,1]" in problems[0]

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            TabularMDP(np.ones((2, 1, 3)), np.zeros((2, 1)), 0.9, np.ones(2) / 2)
        with pytest.raises(ValueError):
            TabularMDP(np.ones((1, 1, 1)), np.zeros((2, 1)), 0.9, np.ones(1))


class TestBellman:
    def test_one_step_backup(self):
        assert bellman_optimality_apply(one_state(), np.zeros((1, 1)))[0, 0] == 1.0

    def test_fixed_point_of_solved_mdp(self, rng):
        mdp = random_mdp(rng)
        q_star = value_iteration(mdp)
        assert np.max(np.abs(bellman_optimality_apply(mdp, q_star) - q_star)) <= 1e-10

    def test_zero_discount_returns_reward(self, rng):
        mdp = random_mdp(rng)
        mdp.discount = 0.0
        np.testing.assert_array_equal(bellman_optimality_apply(mdp, rng.random((5, 3))), mdp.reward)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            bellman_optimality_apply(random_mdp(rng), np.zeros((4, 3)))

    def test_robust_omega_zero_is_standard(self, rng):
        mdp = random_mdp(rng)
        q = rng.random((5, 3))
        mask = compute_neighbors(mdp.kernel)
        np.testing.assert_array_equal(robust_bellman_apply(mdp, q, 0.0, mask), bellman_optimality_apply(mdp, q))

    def test_constant_q_collapse(self):
        kernel = np.zeros((2, 1, 2))
        kernel[0, 0, 1] = kernel[1, 0, 0] = 1.0
        mdp = TabularMDP(kernel, np.array([[0.2], [0.7]]), 0.9, np.array([1.0, 0.0]))
        mask = np.ones((2, 2), dtype=bool)
        out = robust_bellman_apply(mdp, np.full((2, 1), 3.0), 0.4, mask)
        np.testing.assert_allclose(out, mdp.reward + 0.9 * 3.0, atol=1e-15)

    def test_matches_brute_force(self, rng):
        mdp = random_mdp(rng, sparse=True)
        mask = compute_neighbors(mdp.kernel)
        q = rng.random((5, 3)) * 5
        np.testing.assert_allclose(robust_bellman_apply(mdp, q, 0.3, mask),
                                   brute_robust_backup(mdp, q, 0.3, mask), atol=1e-13)

    def test_errors(self, rng):
        mdp = random_mdp(rng)
        mask = compute_neighbors(mdp.kernel)
        with pytest.raises(ValueError):
            robust_bellman_apply(mdp, np.zeros((5, 3)), 1.0, mask)
        with pytest.raises(ValueError):
            robust_bellman_apply(mdp, np.zeros((5, 3)), -0.1, mask)
        mask[2] = False
        with pytest.raises(ValueError):
            robust_bellman_apply(mdp, np.zeros((5, 3)), 0.3, mask)


class TestGreedy:
    def test_argmax(self):
        np.testing.assert_array_equal(greedy_policy(np.array([[1.0, 2.0, 3.0]])), [[0, 0, 1]])

    def test_lowest_index_tie_break(self):
        np.testing.assert_array_equal(greedy_policy(np.array([[5.0, 5.0, 1.0]])), [[1, 0, 0]])

    @given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
    def test_row_shift_invariance(self, seed, c):
        q = np.random.default_rng(seed).random((6, 4))
        shift = np.random.default_rng(seed + 1).uniform(-1, 1, size=(6, 1)) * c
        np.testing.assert_array_equal(greedy_policy(q), greedy_policy(q + shift))


class TestPolicyEvaluation:
    def test_geometric_series(self):
        assert evaluate_policy_exact(one_state(), np.ones((1, 1))) == pytest.approx(2.0, abs=1e-9)

    def test_zero_reward(self, rng):
        mdp = random_mdp(rng)
        mdp.reward[:] = 0.0
        assert evaluate_policy_exact(mdp, greedy_policy(rng.random((5, 3)))) == 0.0

    def test_monte_carlo_chain(self):
        # three-state chain, frozen Monte Carlo reference computed with 1e5 episodes
        kernel = np.zeros((3, 2, 3))
        kernel[0, 0] = [0.5, 0.5, 0.0]
        kernel[0, 1] = [0.1, 0.0, 0.9]
        kernel[1, 0] = [0.0, 0.2, 0.8]
        kernel[1, 1] = [1.0, 0.0, 0.0]
        kernel[2, :, 2] = 1.0
        reward = np.array([[0.1, 0.0], [0.5, 0.3], [1.0, 1.0]])
        mdp = TabularMDP(kernel, reward, 0.8, np.array([1.0, 0.0, 0.0]))
        policy = np.array([[0.5, 0.5], [1.0, 0.0], [1.0, 0.0]])
        rng = make_rng(2024, 0, 9)
        n, horizon = 10**5, 120
        s = np.zeros(n, dtype=int)
        ret = np.zeros(n)
        disc = 1.0
        cdf = np.cumsum(kernel, axis=2)
        for _ in range(horizon):
            a = (rng.random(n) >= policy[s, 0]).astype(int)
            ret += disc * reward[s, a]
            disc *= mdp.discount
            s = np.minimum((cdf[s, a] <= rng.random(n)[:, None]).sum(axis=1), 2)
        mean, se = ret.mean(), ret.std(ddof=1) / np.sqrt(n)
        assert abs(evaluate_policy_exact(mdp, policy) - mean) <= 3 * se

    def test_fixed_point_cap_raises(self):
        with pytest.raises(ConvergenceError):
            _fixed_point(lambda v: v + 1.0, np.zeros(2), max_iter=10)


def vertex_robust_values(mdp, policy, omega, mask, grid=None):
    """Worst case over kernels (1-w) Pbar + w q with q ranging over a grid of the
    neighbor simplex, solved by value iteration on the adversarial MDP."""
    S = mdp.n_states
    r_pi = (policy * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.kernel)
    v = np.zeros(S)
    for _ in range(2000):
        best = np.empty(S)
        for s in range(S):
            nbrs = np.flatnonzero(mask[s])
            cands = []
            for w in itertools.product(np.linspace(0, 1, 5), repeat=len(nbrs)):
                if abs(sum(w) - 1) > 1e-12:
                    continue
                cands.append(float(np.dot(w, v[nbrs])))
            best[s] = min(cands)
        v_new = r_pi + mdp.discount * ((1 - omega) * p_pi @ v + omega * best)
        if np.max(np.abs(v_new - v)) < 1e-13:
            return v_new
        v = v_new
    raise AssertionError("no convergence")


class TestRobustPolicyEvaluation:
    def test_omega_zero_is_standard(self, rng):
        mdp = random_mdp(rng)
        policy = greedy_policy(rng.random((5, 3)))
        np.testing.assert_allclose(robust_policy_evaluation(mdp, policy, 0.0), policy_values(mdp, policy), atol=1e-9)

    @pytest.mark.parametrize("omega", [0.0, 0.3, 0.9])
    def test_constant_reward(self, rng, omega):
        mdp = random_mdp(rng)
        mdp.reward[:] = 0.4
        v = robust_policy_evaluation(mdp, np.full((5, 3), 1 / 3), omega)
        np.testing.assert_allclose(v, 0.4 / (1 - mdp.discount), atol=1e-9)

    def test_vertex_enumeration(self, rng):
        mdp = random_mdp(np.random.default_rng(4), n_states=4, n_actions=2, sparse=True)
        mask = compute_neighbors(mdp.kernel)
        policy = greedy_policy(rng.random((4, 2)))
        np.testing.assert_allclose(robust_policy_evaluation(mdp, policy, 0.2),
                                   vertex_robust_values(mdp, policy, 0.2, mask), atol=1e-9)

    def test_empty_neighbor_set(self, rng):
        mdp = random_mdp(rng)
        mask = compute_neighbors(mdp.kernel)
        mask[0] = False
        with pytest.raises(ValueError):
            robust_policy_evaluation(mdp, np.full((5, 3), 1 / 3), 0.2, mask)


@st.composite
def mdp_and_tables(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    gamma = draw(st.floats(0.05, 0.99))
    mdp = random_mdp(rng, n_states=draw(st.integers(1, 7)), n_actions=draw(st.integers(1, 4)),
                     gamma=gamma, sparse=draw(st.booleans()))
    scale = 1 / (1 - gamma)
    q1 = rng.random(mdp.reward.shape) * scale
    q2 = rng.random(mdp.reward.shape) * scale
    omega = draw(st.floats(0.0, 0.99))
    return mdp, q1, q2, omega


class TestOperatorProperties:
    @given(mdp_and_tables())
    def test_contraction(self, case):
        mdp, q1, q2, omega = case
        mask = compute_neighbors(mdp.kernel)
        lhs = np.max(np.abs(robust_bellman_apply(mdp, q1, omega, mask) - robust_bellman_apply(mdp, q2, omega, mask)))
        assert lhs <= mdp.discount * np.max(np.abs(q1 - q2)) + 1e-12

    @given(mdp_and_tables())
    def test_monotone(self, case):
        mdp, q1, q2, omega = case
        mask = compute_neighbors(mdp.kernel)
        lo, hi = np.minimum(q1, q2), np.maximum(q1, q2)
        assert (robust_bellman_apply(mdp, lo, omega, mask) <= robust_bellman_apply(mdp, hi, omega, mask) + 1e-12).all()

    @given(mdp_and_tables(), st.floats(0.0, 0.99))
    def test_omega_monotone(self, case, other):
        mdp, q1, _, omega = case
        mask = compute_neighbors(mdp.kernel)
        w1, w2 = sorted((omega, other))
        assert (robust_bellman_apply(mdp, q1, w2, mask) <= robust_bellman_apply(mdp, q1, w1, mask) + 1e-12).all()

    @given(mdp_and_tables())
    def test_range_preserved(self, case):
        mdp, q1, _, omega = case
        out = robust_bellman_apply(mdp, q1, omega, compute_neighbors(mdp.kernel))
        assert out.min() >= 0.0 and out.max() <= 1 / (1 - mdp.discount) + 1e-12

    @given(mdp_and_tables())
    def test_average_kernel_evaluation_agrees(self, case):
        mdp, q1, _, _ = case
        policy = greedy_policy(q1)
        v = robust_policy_evaluation(mdp, policy, 0.0)
        assert abs(mdp.initial_dist @ v - evaluate_policy_exact(mdp, policy)) <= 1e-9
