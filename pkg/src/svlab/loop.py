"""Stable Value PPO training loop and its stability gate.

Each round collects data with the behavioral policy, evaluates the frozen
target policy off-policy (V-trace targets, Retrace-GAE advantages), takes
minibatch steps on the value and behavioral policy networks, then asks the
gate whether to copy the behavioral parameters into the target.

With ``delta_v = inf`` and ``k_min = 1`` every round copies, which is plain
PPO; :func:`train_ppo_reference` is an independent plain-PPO loop used to
check that claim.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import diagnostics
from .approximators import (
    ActorCritic,
    AdamState,
    NonFiniteLossError,
    Snapshot,
    ppo_policy_loss,
    project_to_tabular,
    sgd_step,
    value_loss,
)
from .config import GateConfig, PpoConfig
from .estimators import retrace_gae, scale_advantages, vtrace_targets
from .mdp import TabularMdp, TabularPolicy, TransitionBatch, rollout
from .oracle import evaluate_policy_exact


class TrainingError(RuntimeError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


@dataclass
class GateState:
    n_stable: int = 0
    k_pi: int = 0
    last_diff: float = math.nan
    last_target_update_round: int = -1


@dataclass
class RoundRecord:
    round: int
    mean_return: float
    diff: float
    y_bar: float
    scaled_diff: float
    threshold: float
    target_updated: bool
    n_stable: int
    k_pi: int
    k_min: int
    kl_target: float
    kl_behavior: float
    value_loss: float
    entropy: float
    # exact diagnostics, NaN when not tracked
    v_behavior: float = math.nan
    v_target: float = math.nan
    value_error_sq: float = math.nan
    value_error_abs: float = math.nan
    tv_mu: float = math.nan
    diff_cross_round: float = math.nan


RECORD_FIELDS = [f for f in RoundRecord.__dataclass_fields__]


def compute_diff(targets, values):
    """Mean absolute gap ``diff_k`` between targets and predictions, and mean ``|y|``."""
    y = np.asarray(targets, dtype=float).ravel()
    v = np.asarray(values, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("empty batch")
    if y.shape != v.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {v.shape}")
    return float(np.mean(np.abs(y - v))), float(np.mean(np.abs(y)))


def conv(diff: float, y_bar: float, n_stable: int, k_pi: int, gate: GateConfig, k_min: Optional[int] = None):
    """The stability gate. Returns ``(update_target, next_n_stable)``.

    ``k_min`` overrides ``gate.k_min`` when a decay schedule is active.
    """
    k_min = gate.k_min if k_min is None else k_min
    if math.isinf(gate.delta_v):
        stable = True
    else:
        stable = diff <= y_bar * gate.delta_v
    n_stable = (n_stable + 1) * int(stable)
    if n_stable >= k_min or k_pi >= gate.k_max:
        return True, 0
    return False, n_stable


def k_min_schedule(gate: GateConfig, round_index: int, total_rounds: int) -> int:
    """Linear decay of ``k_min`` to 1 over the first ``kmin_decay_fraction`` of training."""
    decay_rounds = gate.kmin_decay_fraction * total_rounds
    if decay_rounds <= 0 or gate.k_min == 1:
        return gate.k_min
    if round_index >= decay_rounds:
        return 1
    frac = round_index / decay_rounds
    return max(1, int(round(gate.k_min - (gate.k_min - 1) * frac)))


def linear_lr(ppo: PpoConfig, round_index: int, total_rounds: int) -> float:
    frac = 1.0 - round_index / max(total_rounds, 1)
    return ppo.lr_final + (ppo.lr_initial - ppo.lr_final) * frac


def tabular_logprobs(policy: TabularPolicy) -> np.ndarray:
    return np.log(policy.probs)


def _bootstrap_values(ac: ActorCritic, batch: TransitionBatch) -> np.ndarray:
    v = ac.values(batch.states)
    v_last = ac.values(batch.next_states[-1:])
    return np.concatenate([v, v_last], axis=0)


def _mean_episode_return(batch: TransitionBatch, gamma: float, running: np.ndarray) -> float:
    # running holds each env's discounted return so far; finished episodes are averaged
    finished = []
    for t in range(len(batch)):
        running += (gamma ** batch.timesteps[t]) * batch.rewards[t]
        done = batch.terminals[t]
        if np.any(done):
            finished.extend(running[done].tolist())
            running[done] = 0.0
    return float(np.mean(finished)) if finished else math.nan


def _minibatch_updates(ac, ppo, batch, targets, advantages, lr, rng, opt_v, opt_p):
    states = batch.states.ravel()
    actions = batch.actions.ravel()
    old_lp = batch.behavior_logprobs.ravel()
    y = targets.ravel()
    adv = advantages.ravel()
    n = len(states)
    v_losses, entropies = [], []
    for _ in range(ppo.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, ppo.minibatch_size):
            idx = perm[start:start + ppo.minibatch_size]
            vl, gv = value_loss(ac, ac.value_params, states[idx], y[idx])
            ac.value_params, opt_v = sgd_step(ac.value_params, gv, lr, ppo.max_grad_norm, opt_v)
            _, gp, info = ppo_policy_loss(ac, ac.policy_params, states[idx], actions[idx], old_lp[idx],
                                          adv[idx], ppo.clip_eps, ppo.entropy_coef)
            ac.policy_params, opt_p = sgd_step(ac.policy_params, gp, lr, ppo.max_grad_norm, opt_p)
            v_losses.append(vl)
            entropies.append(info["entropy"])
    return opt_v, opt_p, float(np.mean(v_losses)), float(np.mean(entropies))


def _mean_kl(p: TabularPolicy, q: TabularPolicy, states) -> float:
    kl = diagnostics.kl_per_state(p, q)
    return float(kl[np.unique(states)].mean())


@dataclass
class TrainResult:
    records: List[RoundRecord]
    actor_critic: ActorCritic
    target: Snapshot
    gate_state: GateState
    target_update_rounds: List[int] = field(default_factory=list)


def train(
    mdp: TabularMdp,
    actor_critic: ActorCritic,
    gate: GateConfig,
    ppo: PpoConfig,
    total_rounds: int,
    seed: int,
    track_exact: bool = False,
    on_round: Optional[Callable[[RoundRecord], None]] = None,
    snapshot_hook: Optional[Callable] = None,
) -> TrainResult:
    """Run SV-PPO for ``total_rounds`` rounds; mutates ``actor_critic`` in place.

    ``on_round`` receives each :class:`RoundRecord` as it is produced.
    ``snapshot_hook(k, ac, target, batch)`` is called after every round for
    optional per-round artifacts.
    """
    if total_rounds < 1:
        raise ValueError("total_rounds must be at least 1")
    ac = actor_critic
    rng = np.random.default_rng(seed)
    target = ac.snapshot()
    gs = GateState()
    opt_v = AdamState.zeros(ac.value_net.size)
    opt_p = AdamState.zeros(ac.policy_net.size)
    env_states = np.full(ppo.num_envs, mdp.initial_state)
    env_t = np.zeros(ppo.num_envs, dtype=int)
    running = np.zeros(ppo.num_envs)
    records, updates = [], []

    for k in range(total_rounds):
        lr = linear_lr(ppo, k, total_rounds)
        k_min = k_min_schedule(gate, k, total_rounds)
        behavior = project_to_tabular(ac)
        target_policy = project_to_tabular(ac, target)
        batch = rollout(mdp, behavior, ppo.horizon, ppo.num_envs, rng, env_states, env_t)
        env_states, env_t = batch.final_states, batch.final_timesteps
        mean_ret = _mean_episode_return(batch, mdp.gamma, running)

        # 1. evaluate the target policy from behavioral data
        target_lp = tabular_logprobs(target_policy)[batch.states, batch.actions]
        values = _bootstrap_values(ac, batch)
        try:
            y = vtrace_targets(batch, target_lp, values, ppo.gamma, ppo.lam, ppo.rho_bar)
            adv = scale_advantages(retrace_gae(batch, target_lp, values, ppo.gamma, ppo.lam, ppo.rho_bar))
        except ValueError as exc:
            raise TrainingError(k, str(exc)) from exc
        diff, y_bar = compute_diff(y, values[:-1])
        v_before = ac.values(np.arange(mdp.num_states)) if track_exact else None

        # 2. update value and behavioral networks
        try:
            opt_v, opt_p, vl, ent = _minibatch_updates(ac, ppo, batch, y, adv, lr, rng, opt_v, opt_p)
        except NonFiniteLossError as exc:
            raise TrainingError(k, str(exc)) from exc

        # cross-round critic change on this round's data, diagnostic only
        diff_cross = float(np.mean(np.abs(ac.values(batch.states) - values[:-1])))

        # 3. stability gate
        k_pi_at_decision = gs.k_pi
        update, gs.n_stable = conv(diff, y_bar, gs.n_stable, gs.k_pi, gate, k_min)
        gs.last_diff = diff
        new_behavior = project_to_tabular(ac)
        if update:
            gs.k_pi = 0
            gs.last_target_update_round = k
            target = ac.snapshot()
            updates.append(k)
        else:
            gs.k_pi += 1
        new_target = project_to_tabular(ac, target)

        rec = RoundRecord(
            round=k,
            mean_return=mean_ret,
            diff=diff,
            y_bar=y_bar,
            scaled_diff=diff / y_bar if y_bar > 0 else math.nan,
            threshold=gate.delta_v,
            target_updated=update,
            n_stable=gs.n_stable,
            k_pi=k_pi_at_decision,
            k_min=k_min,
            kl_target=_mean_kl(target_policy, new_target, batch.states),
            kl_behavior=_mean_kl(behavior, new_behavior, batch.states),
            value_loss=vl,
            entropy=ent,
            diff_cross_round=diff_cross,
        )
        if track_exact:
            m = diagnostics.round_metrics(
                mdp,
                target_policy=target_policy,
                prev_behavior=behavior,
                new_behavior=new_behavior,
                v_est=v_before,
            )
            rec.v_behavior = m["v_behavior"]
            rec.v_target = m["v_target"]
            rec.value_error_sq = m["value_error_sq"]
            rec.value_error_abs = m["value_error_abs"]
            rec.tv_mu = m["tv_mu"]
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        if snapshot_hook is not None:
            snapshot_hook(k, ac, target, batch)

    return TrainResult(records=records, actor_critic=ac, target=target, gate_state=gs,
                       target_update_rounds=updates)


def gae(rewards, values, terminals, gamma: float, lam: float) -> np.ndarray:
    """Plain on-policy GAE(lambda)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    cont = 1.0 - np.asarray(terminals, dtype=float)
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(len(rewards))):
        delta = rewards[t] + gamma * cont[t] * values[t + 1] - values[t]
        last = delta + gamma * lam * cont[t] * last
        adv[t] = last
    return adv


def train_ppo_reference(
    mdp: TabularMdp,
    actor_critic: ActorCritic,
    ppo: PpoConfig,
    total_rounds: int,
    seed: int,
) -> ActorCritic:
    """Standard PPO: one policy collects data and is the one being evaluated."""
    ac = actor_critic
    rng = np.random.default_rng(seed)
    opt_v = AdamState.zeros(ac.value_net.size)
    opt_p = AdamState.zeros(ac.policy_net.size)
    env_states = np.full(ppo.num_envs, mdp.initial_state)
    env_t = np.zeros(ppo.num_envs, dtype=int)
    for k in range(total_rounds):
        lr = linear_lr(ppo, k, total_rounds)
        policy = project_to_tabular(ac)
        batch = rollout(mdp, policy, ppo.horizon, ppo.num_envs, rng, env_states, env_t)
        env_states, env_t = batch.final_states, batch.final_timesteps
        values = _bootstrap_values(ac, batch)
        adv = gae(batch.rewards, values, batch.terminals, ppo.gamma, ppo.lam)
        returns = values[:-1] + adv
        opt_v, opt_p, _, _ = _minibatch_updates(ac, ppo, batch, returns, scale_advantages(adv),
                                                lr, rng, opt_v, opt_p)
    return ac


def exact_target_value(mdp: TabularMdp, ac: ActorCritic, target: Snapshot) -> float:
    return float(evaluate_policy_exact(mdp, project_to_tabular(ac, target)).v[mdp.initial_state])

