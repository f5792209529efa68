import math

import numpy as np
import pytest

from svlab import diagnostics as dg
from svlab.mdp import TabularPolicy, build_four_rooms, build_random_mdp
from svlab.oracle import evaluate_policy_exact, visitation_distribution
from svlab.suites import perturb_policy


def test_value_gap_exact_q_collapses_to_equality():
    mdp = build_random_mdp(7, 3, 0.9, 0)
    rng = np.random.default_rng(0)
    pi, pi2 = TabularPolicy.random(7, 3, rng), TabularPolicy.random(7, 3, rng)
    rep = dg.value_gap_report(mdp, pi, pi2, evaluate_policy_exact(mdp, pi).q)
    assert rep.satisfied
    assert rep.lower == pytest.approx(rep.actual, abs=1e-9)
    assert rep.upper == pytest.approx(rep.actual, abs=1e-9)


def test_value_gap_with_bad_q_still_holds():
    mdp = build_random_mdp(5, 2, 0.99, 1)
    rng = np.random.default_rng(1)
    pi, pi2 = TabularPolicy.random(5, 2, rng), TabularPolicy.random(5, 2, rng)
    rep = dg.value_gap_report(mdp, pi, pi2, rng.normal(0, 500, size=(5, 2)))
    assert rep.satisfied and rep.worst_slack >= -dg.BOUND_TOL


def test_lemma1_equal_distributions_tight():
    rng = np.random.default_rng(2)
    mu = rng.dirichlet(np.ones(6)).reshape(3, 2)
    q, q_true = rng.random((3, 2)), rng.random((3, 2))
    rep = dg.error_transfer_report(mu, mu, q, q_true, 0.9)
    assert rep.slack_upper == pytest.approx(0.0, abs=1e-15)
    assert rep.lower == -math.inf


def test_npa_premise_and_conclusion():
    mdp = build_random_mdp(8, 3, 0.9, 3)
    rng = np.random.default_rng(3)
    beta = TabularPolicy.random(8, 3, rng)
    beta2 = perturb_policy(beta, 0.1 * (1 - 0.9), rng)
    assert dg.per_state_tv(beta, beta2).max() <= 0.01 + 1e-15
    ok, tv = dg.npa_check(mdp, beta, beta2, 0.1)
    assert ok and tv <= 0.1


def test_improvement_bound_identical_policies():
    mdp = build_random_mdp(6, 2, 0.9, 4)
    pi = TabularPolicy.random(6, 2, np.random.default_rng(4))
    q = evaluate_policy_exact(mdp, pi).q
    rep = dg.improvement_bound_report(mdp, pi, pi, pi, q, 0.0, 0.0)
    # estimated advantage of pi over itself is 0 and so is the gap
    assert rep.premises_hold and rep.satisfied
    assert rep.lower == pytest.approx(0.0, abs=1e-9)


def test_improvement_bound_flags_failed_premise():
    mdp = build_random_mdp(6, 2, 0.9, 5)
    rng = np.random.default_rng(5)
    pi, beta = TabularPolicy.random(6, 2, rng), TabularPolicy.random(6, 2, rng)
    far = TabularPolicy.random(6, 2, rng)
    rep = dg.improvement_bound_report(mdp, pi, beta, far, evaluate_policy_exact(mdp, pi).q, 0.0, 0.001)
    assert not rep.premises_hold


def test_cpi_budget_below_quarter_percent():
    budget = dg.cpi_tv_budget(0.99)
    assert 0 < budget < 0.0025
    # closed form for unit advantage: alpha < (1 - gamma)^2 / (2 gamma)
    assert budget == pytest.approx(0.01 ** 2 / (2 * 0.99), rel=1e-3)


def test_bound_helpers():
    assert dg.sv_lower_bound(1.0, 0.0, 0.0, 0.5) == pytest.approx(2.0)
    assert dg.cpi_lower_bound(1.0, 0.0, 0.0, 0.5) == 0.0
    np.testing.assert_allclose(dg.clamp_q([-1.0, 50.0, 3.0], 0.9), [0.0, 10.0, 3.0], rtol=1e-14)


def test_empirical_distribution_discounting():
    from svlab.mdp import TransitionBatch

    b = TransitionBatch(np.array([0, 1]), np.array([0, 0]), np.zeros(2), np.array([1, 0]),
                        np.zeros(2, bool), np.zeros(2), timesteps=np.array([0, 1]))
    np.testing.assert_allclose(dg.empirical_distribution(b, 2, 1), [[0.5], [0.5]])
    np.testing.assert_allclose(dg.empirical_distribution(b, 2, 1, gamma=0.5), [[2 / 3], [1 / 3]])


def test_round_metrics_fields():
    mdp = build_four_rooms()
    S = mdp.num_states
    u = TabularPolicy.uniform(S, 4)
    ev = evaluate_policy_exact(mdp, u)
    m = dg.round_metrics(mdp, u, u, u, ev.v, u, u)
    assert m["value_error_sq"] == pytest.approx(0.0, abs=1e-20)
    assert m["tv_mu"] == 0.0 and m["kl_behavior"] == 0.0 and m["kl_target"] == 0.0
    assert m["v_target"] == pytest.approx(ev.v[mdp.initial_state])
    d = visitation_distribution(mdp, u).states
    m2 = dg.round_metrics(mdp, u, u, u, ev.v + 0.1)
    assert m2["value_error_abs"] == pytest.approx(0.1 * d.sum())
