import numpy as np
import pytest

from svlab.approximators import (
    ActorCritic,
    AdamState,
    NonFiniteLossError,
    clip_by_global_norm,
    entropy,
    load_checkpoint,
    one_hot_features,
    policy_logprobs,
    ppo_policy_loss,
    project_to_tabular,
    save_checkpoint,
    sgd_step,
    state_logprobs,
    value_loss,
)
from svlab.mdp import build_random_mdp
from svlab.suites import finite_difference, gradient_problem, relative_error


@pytest.mark.parametrize("hidden", [0, 8])
def test_gradients_match_finite_differences(hidden):
    rng = np.random.default_rng(hidden)
    for _ in range(3):
        ac, s, a, old, adv, y = gradient_problem(rng, hidden=hidden)
        _, g, _ = ppo_policy_loss(ac, ac.policy_params, s, a, old, adv, 0.2, 0.01)
        fd = finite_difference(lambda p: ppo_policy_loss(ac, p, s, a, old, adv, 0.2, 0.01)[0], ac.policy_params)
        assert relative_error(g, fd) < 1e-6
        _, g = value_loss(ac, ac.value_params, s, y)
        fd = finite_difference(lambda p: value_loss(ac, p, s, y)[0], ac.value_params)
        assert relative_error(g, fd) < 1e-6


def test_clip_example_value():
    # ratio 1.5, advantage 1, eps 0.2 -> surrogate 1.2, zero gradient
    ac = ActorCritic.create(one_hot_features(1), 2, hidden=0, seed=0)
    logp = policy_logprobs(ac, ac, [0], [0])
    loss, grad, info = ppo_policy_loss(ac, ac.policy_params, [0], [0], logp - np.log(1.5), [1.0], 0.2, 0.0)
    assert loss == pytest.approx(-1.2)
    np.testing.assert_allclose(grad, 0.0)
    assert info["clip_frac"] == 1.0


def test_unit_ratio_gives_vanilla_policy_gradient():
    rng = np.random.default_rng(0)
    ac, s, a, _, adv, _ = gradient_problem(rng, hidden=4)
    logp = policy_logprobs(ac, ac, s, a)
    _, g, _ = ppo_policy_loss(ac, ac.policy_params, s, a, logp, adv, 0.2, 0.0)
    # gradient of -mean(adv * log pi(a|s))
    fd = finite_difference(lambda p: -np.mean(adv * policy_logprobs(ac, _Params(p), s, a)), ac.policy_params)
    assert relative_error(g, fd) < 1e-6


class _Params:
    def __init__(self, p):
        self.params = p


def test_entropy_gradient_and_uniform_maximum():
    ac = ActorCritic.create(one_hot_features(3), 4, hidden=0, seed=0, policy_output_gain=0.0)
    h, g = entropy(ac, ac.policy_params, [0, 1, 2])
    assert h == pytest.approx(np.log(4))
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_policy_rows_are_distributions():
    ac = ActorCritic.create(one_hot_features(6), 3, hidden=5, seed=1, policy_output_gain=3.0)
    probs = np.exp(state_logprobs(ac, ac))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    mdp = build_random_mdp(6, 3, 0.9, 0)
    pi = project_to_tabular(ac, mdp=mdp)
    np.testing.assert_allclose(pi.probs, probs, atol=1e-12)


def test_snapshot_is_frozen():
    ac = ActorCritic.create(one_hot_features(4), 2, hidden=3, seed=2)
    snap = ac.snapshot()
    before = state_logprobs(ac, snap).copy()
    ac.policy_params += 1.0
    np.testing.assert_array_equal(state_logprobs(ac, snap), before)
    with pytest.raises(ValueError):
        snap.params[0] = 5.0


def test_non_finite_loss_raises():
    ac = ActorCritic.create(one_hot_features(2), 2, hidden=0, seed=0)
    with pytest.raises(NonFiniteLossError):
        value_loss(ac, ac.value_params, [0], [np.inf])


def test_global_norm_clip():
    g = np.array([6.0, 8.0])
    assert np.linalg.norm(clip_by_global_norm(g, 1.0)) == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_array_equal(clip_by_global_norm(g, 100.0), g)


def test_adam_step_is_pure_and_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    st = AdamState.zeros(2)
    new, st2 = sgd_step(p, np.zeros(2), 0.1, 1.0, st)
    np.testing.assert_array_equal(new, p)
    assert st.t == 0 and st2.t == 1
    new, _ = sgd_step(p, np.array([1.0, -1.0]), 0.1, 1.0, st)
    # the first Adam step moves each coordinate by about lr against the gradient sign
    np.testing.assert_allclose(new, p + np.array([-0.1, 0.1]), atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    ac = ActorCritic.create(one_hot_features(5), 3, hidden=4, seed=3)
    path = tmp_path / "ac.ckpt"
    save_checkpoint(path, ac)
    back = load_checkpoint(path, ac.features)
    np.testing.assert_array_equal(back.policy_params, ac.policy_params)
    np.testing.assert_array_equal(back.value_params, ac.value_params)


def test_repeated_states_agree_bitwise():
    ac = ActorCritic.create(one_hot_features(4), 3, hidden=6, seed=4)
    lp = policy_logprobs(ac, ac, [1, 2, 1, 1], [0, 0, 0, 0])
    assert lp[0] == lp[2] == lp[3]
