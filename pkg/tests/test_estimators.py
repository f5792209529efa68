import numpy as np
import pytest

from svlab.estimators import is_weights, retrace_gae, scale_advantages, td_errors, vtrace_targets
from svlab.loop import gae
from svlab.mdp import TabularPolicy, TransitionBatch, build_random_mdp
from svlab.oracle import evaluate_policy_exact
from svlab.suites import lambda_return_forward, random_batch


def batch_of(rewards, terminals, behavior_lp):
    T = len(rewards)
    return TransitionBatch(
        states=np.zeros(T, int),
        actions=np.zeros(T, int),
        rewards=np.asarray(rewards, float),
        next_states=np.zeros(T, int),
        terminals=np.asarray(terminals, bool),
        behavior_logprobs=np.asarray(behavior_lp, float),
    )


def test_two_step_by_hand():
    # ratios 2 and 0.5; rho_bar 1.5 and lam 0.9 clip them to rho = (1.5, 0.5), c = (0.9, 0.5)
    b = batch_of([1.0, 0.0], [False, False], np.log([0.25, 0.5]))
    target = np.log([0.5, 0.25])
    v = np.array([0.2, 0.4, 1.0])
    g = 0.5
    d0 = 1.0 + g * 0.4 - 0.2
    d1 = 0.0 + g * 1.0 - 0.4
    y1 = 0.4 + 0.5 * d1
    y0 = 0.2 + 1.5 * d0 + g * 0.9 * (y1 - 0.4)
    np.testing.assert_allclose(vtrace_targets(b, target, v, g, 0.9, 1.5), [y0, y1], atol=1e-15)
    a1 = d1
    a0 = d0 + g * 0.9 * a1
    np.testing.assert_allclose(retrace_gae(b, target, v, g, 0.9, 1.5), [a0, a1], atol=1e-15)


def test_terminal_cuts_bootstrap_and_tail():
    b = batch_of([1.0, 0.5], [True, False], np.zeros(2))
    v = np.array([0.3, 7.0, 2.0])
    y = vtrace_targets(b, np.zeros(2), v, 0.9, 1.0, 1.0)
    # step 0 ends the episode: target is just the reward
    assert y[0] == pytest.approx(1.0)
    assert y[1] == pytest.approx(0.5 + 0.9 * 2.0)


def test_is_weights_clip_and_log_space():
    w = is_weights(np.array([0.0, -800.0]), np.array([-800.0, 0.0]), lam=0.95, rho_bar=5.0)
    np.testing.assert_allclose(w.rho, [5.0, 0.0])
    np.testing.assert_allclose(w.c, [0.95, 0.0])


def test_raising_rho_bar_never_lowers_rho():
    rng = np.random.default_rng(0)
    t, b = rng.normal(size=50), rng.normal(size=50)
    lo = is_weights(t, b, 1.0, 1.0).rho
    hi = is_weights(t, b, 1.0, 5.0).rho
    assert np.all(hi >= lo)


def test_on_policy_reduces_to_td_lambda_and_gae():
    rng = np.random.default_rng(1)
    batch, lp, v = random_batch(rng, 40)
    y = vtrace_targets(batch, lp, v, 0.97, 0.9, 5.0)
    adv = retrace_gae(batch, lp, v, 0.97, 0.9, 5.0)
    np.testing.assert_allclose(y, lambda_return_forward(batch.rewards, v, batch.terminals, 0.97, 0.9), atol=1e-10)
    np.testing.assert_allclose(adv, gae(batch.rewards, v, batch.terminals, 0.97, 0.9), atol=1e-10)


def test_lambda_one_on_policy_gives_discounted_return():
    b = batch_of([1.0, 2.0, 3.0], [False, False, False], np.zeros(3))
    v = np.array([5.0, -1.0, 4.0, 10.0])
    y = vtrace_targets(b, np.zeros(3), v, 0.5, 1.0, 5.0)
    assert y[0] == pytest.approx(1 + 0.5 * 2 + 0.25 * 3 + 0.125 * 10)


def test_one_step_target_is_unbiased_for_true_values():
    # E_{a ~ beta, s'}[y] = V^pi(s) when v = V^pi and ratios are not truncated
    mdp = build_random_mdp(5, 3, 0.9, 0)
    rng = np.random.default_rng(0)
    pi, beta = TabularPolicy.random(5, 3, rng), TabularPolicy.random(5, 3, rng)
    V = evaluate_policy_exact(mdp, pi).v
    for s in range(5):
        expected = 0.0
        for a in range(3):
            for s2 in range(5):
                b = batch_of([mdp.reward[s, a]], [False], [np.log(beta.probs[s, a])])
                y = vtrace_targets(b, [np.log(pi.probs[s, a])], np.array([V[s], V[s2]]), mdp.gamma, 1.0, np.inf)
                expected += beta.probs[s, a] * mdp.transition[s, a, s2] * y[0]
        assert expected == pytest.approx(V[s], abs=1e-12)


def test_batched_columns_are_independent():
    rng = np.random.default_rng(2)
    cols = [random_batch(rng, 12, on_policy=False) for _ in range(3)]
    stacked = TransitionBatch(
        *[np.stack([getattr(c[0], f) for c in cols], axis=1)
          for f in ("states", "actions", "rewards", "next_states", "terminals", "behavior_logprobs")]
    )
    lp = np.stack([c[1] for c in cols], axis=1)
    v = np.stack([c[2] for c in cols], axis=1)
    y = vtrace_targets(stacked, lp, v, 0.9, 0.95, 5.0)
    for j, (b, t, vv) in enumerate(cols):
        np.testing.assert_allclose(y[:, j], vtrace_targets(b, t, vv, 0.9, 0.95, 5.0), atol=1e-15)


def test_shape_and_finiteness_errors():
    b = batch_of([1.0, 0.0], [False, False], np.zeros(2))
    with pytest.raises(ValueError):
        vtrace_targets(b, np.zeros(2), np.zeros(2), 0.9, 1.0, 1.0)
    with pytest.raises(ValueError):
        vtrace_targets(b, np.array([0.0, np.nan]), np.zeros(3), 0.9, 1.0, 1.0)


def test_scale_advantages():
    a = np.array([1.0, 3.0])
    np.testing.assert_allclose(scale_advantages(a), a / 1.0)
    np.testing.assert_allclose(scale_advantages(np.array([2.0, 2.0])), [2.0, 2.0])
    with pytest.raises(ValueError):
        scale_advantages(np.array([]))


def test_td_errors():
    np.testing.assert_allclose(td_errors([1.0], [0.5, 2.0], [False], 0.5), [1.5])
    np.testing.assert_allclose(td_errors([1.0], [0.5, 2.0], [True], 0.5), [0.5])
