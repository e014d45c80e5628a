import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedrq.covering import average_kernel, compute_neighbors, heterogeneity
from fedrq.envgen import EnvFamily, make_garnet
from fedrq.federation import FederationConfig, run_federation
from fedrq.mdp import (TabularMDP, bellman_optimality_apply, greedy_policy, robust_bellman_apply,
                       robust_policy_evaluation, value_iteration)
from fedrq.oracle import (AssumptionError, OracleResult, mean_robust_bellman_apply, robust_q_star,
                          theorem1_bound, verify_convergence)

from conftest import garnet_family


def per_agent_mean(fam, q, omega):
    outs = [robust_bellman_apply(m, q, omega, compute_neighbors(m.kernel)) for m in fam.members]
    return sum(outs) / len(outs)


class TestMeanOperator:
    def test_single_member(self, rng):
        env = make_garnet(5, 2, 3, 0.8, 0)
        q = rng.random((5, 2))
        np.testing.assert_array_equal(mean_robust_bellman_apply(EnvFamily([env]), q, 0.4),
                                      robust_bellman_apply(env, q, 0.4, compute_neighbors(env.kernel)))

    def test_omega_zero(self, rng):
        fam = garnet_family(1)
        q = rng.random((8, 3))
        np.testing.assert_allclose(mean_robust_bellman_apply(fam, q, 0.0),
                                   bellman_optimality_apply(fam.average_mdp(), q), atol=1e-15)

    @given(st.integers(0, 1000), st.floats(0.0, 0.99))
    def test_equals_mean_of_agents(self, seed, omega):
        fam = garnet_family(seed, n_agents=3)
        q = np.random.default_rng(seed).random((8, 3)) * 5
        assert np.max(np.abs(mean_robust_bellman_apply(fam, q, omega) - per_agent_mean(fam, q, omega))) <= 1e-12

    def test_assumption_violation(self):
        a = make_garnet(4, 2, 2, 0.8, 0)
        b = make_garnet(4, 2, 2, 0.8, 1)
        b.reward = a.reward
        with pytest.raises(AssumptionError):
            mean_robust_bellman_apply(EnvFamily([a, b]), np.zeros((4, 2)), 0.2)


class TestRobustQStar:
    def test_single_state(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, np.ones(1))
        for omega in (0.0, 0.5, 0.9):
            assert robust_q_star(EnvFamily([mdp]), omega).q_star[0, 0] == pytest.approx(2.0, abs=1e-9)

    def test_homogeneous_reduction(self):
        base = make_garnet(6, 3, 3, 0.9, 2)
        res = robust_q_star(EnvFamily([base, base, base]), 0.0)
        np.testing.assert_allclose(res.q_star, value_iteration(base), atol=1e-9)

    def test_residual_and_evaluation(self):
        fam = garnet_family(3, n_states=6)
        res = robust_q_star(fam, 0.25)
        assert res.residual <= 1e-10
        assert np.max(np.abs(mean_robust_bellman_apply(fam, res.q_star, 0.25) - res.q_star)) <= 1e-10
        v = robust_policy_evaluation(fam.average_mdp(), res.pi_star, 0.25)
        np.testing.assert_allclose(v, res.v_star, atol=1e-8)

    def test_unique_from_two_starts(self):
        fam = garnet_family(4)
        tol = 1e-10
        a = robust_q_star(fam, 0.3, tol)
        b = robust_q_star(fam, 0.3, tol, q0=np.full((8, 3), 1 / (1 - fam.discount)))
        assert np.max(np.abs(a.q_star - b.q_star)) <= 2 * tol

    def test_random_policies_never_beat_optimum(self):
        fam = garnet_family(5)
        res = robust_q_star(fam, 0.4)
        rng = np.random.default_rng(0)
        for _ in range(20):
            pi = greedy_policy(rng.random((8, 3)))
            assert (robust_policy_evaluation(fam.average_mdp(), pi, 0.4) <= res.v_star + 1e-8).all()

    def test_worst_case_dominance(self):
        vacuous, checked = 0, 0
        for seed in range(10):
            fam = garnet_family(seed)
            omega = heterogeneity(fam.kernels).kappa_max
            robust = robust_q_star(fam, omega)
            plain = robust_q_star(fam, 0.0)
            if np.array_equal(robust.pi_star, plain.pi_star):
                vacuous += 1
                continue
            checked += 1
            avg = fam.average_mdp()
            v_r = robust_policy_evaluation(avg, robust.pi_star, omega)
            v_p = robust_policy_evaluation(avg, plain.pi_star, omega)
            assert (v_r >= v_p - 1e-8).all()
        assert checked > 0

    def test_to_dict(self):
        res = robust_q_star(garnet_family(6), 0.2)
        doc = res.to_dict()
        assert doc["omega"] == 0.2 and len(doc["q_star"]) == 8


class TestBound:
    def test_example(self):
        assert theorem1_bound(0.5, 2, 14) == pytest.approx(4.0, abs=1e-12)

    def test_decreasing(self):
        b = theorem1_bound(0.7, 4, np.arange(1000))
        assert (np.diff(b) < 0).all()

    @pytest.mark.parametrize("gamma,E", [(0.5, 1), (0.1, 3), (1.0, 3)])
    def test_range(self, gamma, E):
        with pytest.raises(ValueError):
            theorem1_bound(gamma, E, 5)

    @given(st.floats(0.2, 0.99))
    def test_base_case_dominates_range(self, gamma):
        # the bound at t=1 with E=2 already covers any table in [0, 1/(1-gamma)]
        assert theorem1_bound(gamma, 2, 1) >= 1 / (1 - gamma)


class TestVerify:
    def _trace(self, fam, E=5, T=20000):
        omega = heterogeneity(fam.kernels).kappa_max
        oracle = robust_q_star(fam, omega)
        cfg = FederationConfig(sync_interval=E, total_steps=T, omega=omega, record_every=10)
        return run_federation(cfg, fam, oracle.q_star), oracle, omega

    def test_converged_run_passes(self):
        fam = garnet_family(2, gamma=0.5)
        trace, oracle, _ = self._trace(fam)
        report = verify_convergence(trace, oracle, 0.5, 5)
        assert report.passed and report.final_gap <= 1e-4 and not report.violations

    def test_wrong_oracle_fails(self):
        fam = garnet_family(2, gamma=0.5)
        trace, _, omega = self._trace(fam)
        wrong = robust_q_star(fam, 0.0)
        report = verify_convergence(trace, wrong, 0.5, 5)
        assert not report.passed
        assert report.violations and report.violations[-1] == trace.t[-1]

    def test_single_agent_two_step_period(self):
        fam = EnvFamily([make_garnet(5, 2, 3, 0.8, 1)])
        oracle = robust_q_star(fam, 0.3)
        cfg = FederationConfig(sync_interval=2, total_steps=50000, omega=0.3, record_every=50)
        trace = run_federation(cfg, fam, oracle.q_star)
        report = verify_convergence(trace, oracle, 0.8, 2)
        assert report.passed
        assert report.bound[0] >= 1 / (1 - 0.8)
