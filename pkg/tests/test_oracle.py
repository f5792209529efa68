import itertools

import numpy as np
import pytest

from svlab.mdp import TabularMdp, TabularPolicy, build_four_rooms, build_random_mdp
from svlab.oracle import (
    evaluate_policy_exact,
    greedy_policy,
    performance_difference,
    q_fixed_point,
    truncated_visitation,
    tv_distance,
    value_iteration,
    visitation_distribution,
)


def chain_mdp(gamma=0.9):
    # 0 -> 1 -> 2 (terminal); reward 1 on leaving state 1
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 2] = 1.0
    R = np.array([[0.0], [1.0], [0.0]])
    return TabularMdp(P, R, gamma, 0, frozenset({2}))


def test_chain_by_hand():
    mdp = chain_mdp(0.9)
    pi = TabularPolicy.uniform(3, 1)
    ev = evaluate_policy_exact(mdp, pi)
    np.testing.assert_allclose(ev.v, [0.9, 1.0, 0.0], atol=1e-14)
    d = visitation_distribution(mdp, pi).d[:, 0]
    np.testing.assert_allclose(d, [0.1, 0.09, 0.81], atol=1e-14)


def test_solve_matches_fixed_point_iteration():
    mdp = build_random_mdp(12, 4, 0.9, 0)
    pi = TabularPolicy.random(12, 4, np.random.default_rng(0))
    np.testing.assert_allclose(evaluate_policy_exact(mdp, pi).q, q_fixed_point(mdp, pi, 600), atol=1e-10)


def test_visitation_matches_truncated_sum():
    mdp = build_random_mdp(10, 3, 0.9, 1)
    pi = TabularPolicy.random(10, 3, np.random.default_rng(1))
    d = visitation_distribution(mdp, pi).d
    assert d.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(d, truncated_visitation(mdp, pi, 700), atol=1e-12)


def test_value_iteration_beats_every_deterministic_policy():
    mdp = build_random_mdp(4, 3, 0.9, 2)
    v_star, pi_star = value_iteration(mdp)
    best = -np.inf
    for actions in itertools.product(range(3), repeat=4):
        p = np.zeros((4, 3))
        p[np.arange(4), actions] = 1.0
        best = max(best, evaluate_policy_exact(mdp, TabularPolicy(p)).v[0])
    assert v_star[0] == pytest.approx(best, abs=1e-10)
    assert evaluate_policy_exact(mdp, pi_star).v[0] == pytest.approx(best, abs=1e-10)


def test_greedy_policy_splits_ties():
    q = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 1.0]])
    np.testing.assert_allclose(greedy_policy(q).probs, [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0]])


def test_performance_difference_self_is_zero():
    mdp = build_random_mdp(6, 2, 0.99, 3)
    pi = TabularPolicy.random(6, 2, np.random.default_rng(3))
    assert performance_difference(mdp, pi, pi) == pytest.approx(0.0, abs=1e-12)


def test_performance_difference_matches_value_gap():
    mdp = build_random_mdp(8, 3, 0.99, 4)
    rng = np.random.default_rng(4)
    pi, pi2 = TabularPolicy.random(8, 3, rng), TabularPolicy.random(8, 3, rng)
    gap = evaluate_policy_exact(mdp, pi2).v[0] - evaluate_policy_exact(mdp, pi).v[0]
    assert performance_difference(mdp, pi, pi2) == pytest.approx(gap, abs=1e-8)


def test_four_rooms_optimal_and_uniform_values():
    mdp = build_four_rooms(0.8, 0.99)
    v_star, pi_star = value_iteration(mdp)
    s0 = mdp.initial_state
    v_uniform = evaluate_policy_exact(mdp, TabularPolicy.uniform(mdp.num_states, 4)).v[s0]
    assert evaluate_policy_exact(mdp, pi_star).v[s0] == pytest.approx(v_star[s0], abs=1e-10)
    assert 0.0 < v_uniform < v_star[s0] < 1.0
    assert v_star[s0] == pytest.approx(0.0811, abs=5e-4)


def test_tv_distance():
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])
