"""Randomized verification suites behind ``svlab verify``.

Each suite draws its own instances from a seed, checks one identity or
inequality on every instance and returns a :class:`SuiteResult` with the
violation count and the smallest slack seen.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diagnostics as dg
from .approximators import ActorCritic, entropy, one_hot_features, policy_logprobs, ppo_policy_loss, value_loss
from .config import GateConfig
from .estimators import retrace_gae, vtrace_targets
from .loop import conv, gae
from .mdp import TabularPolicy, TransitionBatch, build_random_mdp
from .oracle import OracleError, evaluate_policy_exact, performance_difference, visitation_distribution

GAMMAS = (0.9, 0.99)
SHIFT_DELTAS = (0.01, 0.1, 0.5)


@dataclass
class SuiteResult:
    name: str
    instances: int
    violations: int
    worst_slack: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def random_instance(rng: np.random.Generator, max_states: int = 20, max_actions: int = 5):
    """Random MDP with ``|S| <= max_states``, ``|A| <= max_actions`` and gamma in {0.9, 0.99}."""
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    gamma = float(rng.choice(GAMMAS))
    return build_random_mdp(S, A, gamma, int(rng.integers(2**31)))


def perturb_policy(policy: TabularPolicy, magnitude: float, rng: np.random.Generator) -> TabularPolicy:
    """Move each state's distribution toward a random action by TV ``<= magnitude``.

    The TV distance equals ``magnitude`` exactly unless the state is already
    closer than that to the chosen point mass.
    """
    probs = policy.probs.copy()
    S, A = probs.shape
    for s in range(S):
        target = np.zeros(A)
        target[rng.integers(A)] = 1.0
        gap = 0.5 * np.abs(target - probs[s]).sum()
        if gap > 0:
            alpha = min(1.0, magnitude / gap)
            probs[s] = (1 - alpha) * probs[s] + alpha * target
    probs /= probs.sum(axis=1, keepdims=True)
    return TabularPolicy(probs)


def noisy_q(q: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    scale = rng.choice([0.0, 0.01, 0.1, 1.0]) / (1 - gamma)
    q_est = q + scale * rng.standard_normal(q.shape)
    if rng.random() < 0.25:
        # adversarial: flip the sign of one state's estimates
        s = rng.integers(q.shape[0])
        q_est[s] = -q_est[s]
    return dg.clamp_q(q_est, gamma)


def suite_pdl(instances: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, 0
    for _ in range(instances):
        mdp = random_instance(rng)
        pi = TabularPolicy.random(mdp.num_states, mdp.num_actions, rng)
        pi2 = TabularPolicy.random(mdp.num_states, mdp.num_actions, rng)
        ev, ev2 = evaluate_policy_exact(mdp, pi), evaluate_policy_exact(mdp, pi2)
        d2 = visitation_distribution(mdp, pi2).d
        lhs = float((d2 * ev.adv).sum()) / (1 - mdp.gamma)
        rhs = ev2.v[mdp.initial_state] - ev.v[mdp.initial_state]
        err = abs(lhs - rhs)
        try:
            performance_difference(mdp, pi, pi2)
        except OracleError:
            bad += 1
            continue
        bad += err > dg.BOUND_TOL
        worst = min(worst, dg.BOUND_TOL - err)
    return SuiteResult("pdl", instances, int(bad), worst)


def suite_thm1(instances: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, 0
    for _ in range(instances):
        mdp = random_instance(rng)
        pi = TabularPolicy.random(mdp.num_states, mdp.num_actions, rng)
        pi2 = TabularPolicy.random(mdp.num_states, mdp.num_actions, rng)
        q = noisy_q(evaluate_policy_exact(mdp, pi).q, mdp.gamma, rng)
        rep = dg.value_gap_report(mdp, pi, pi2, q)
        bad += not rep.satisfied
        worst = min(worst, rep.worst_slack)
    return SuiteResult("thm1", instances, int(bad), worst)


def suite_lemma1(instances: int = 500, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad = math.inf, 0
    for i in range(instances):
        mdp = random_instance(rng)
        S, A, g = mdp.num_states, mdp.num_actions, mdp.gamma
        q_true = evaluate_policy_exact(mdp, TabularPolicy.random(S, A, rng)).q
        q_est = rng.uniform(0, 1 / (1 - g), size=(S, A))
        mu = rng.dirichlet(np.ones(S * A)).reshape(S, A)
        if i % 5 == 0:
            # disjoint supports
            mask = rng.random((S, A)) < 0.5
            mu = np.where(mask, rng.random((S, A)) + 1e-3, 0.0)
            mu_prime = np.where(~mask, rng.random((S, A)) + 1e-3, 0.0)
            if mu.sum() == 0 or mu_prime.sum() == 0:
                mu, mu_prime = np.ones((S, A)), np.ones((S, A))
            mu, mu_prime = mu / mu.sum(), mu_prime / mu_prime.sum()
        else:
            mu_prime = rng.dirichlet(np.ones(S * A)).reshape(S, A)
        rep = dg.error_transfer_report(mu, mu_prime, q_est, q_true, g, tol=dg.BOUND_TOL)
        bad += not rep.satisfied
        worst = min(worst, rep.slack_upper)
    return SuiteResult("lemma1", instances, int(bad), worst)


def suite_lemma2(instances: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad, premise_failures = math.inf, 0, 0
    for i in range(instances):
        mdp = random_instance(rng)
        delta = SHIFT_DELTAS[i % len(SHIFT_DELTAS)]
        beta = TabularPolicy.random(mdp.num_states, mdp.num_actions, rng)
        beta2 = perturb_policy(beta, delta * (1 - mdp.gamma), rng)
        try:
            ok, tv = dg.npa_check(mdp, beta, beta2, delta)
        except dg.BoundViolation:
            bad += 1
            continue
        premise_failures += not ok
        worst = min(worst, delta - tv)
    return SuiteResult("lemma2", instances, int(bad + premise_failures), worst,
                       {"premise_failures": int(premise_failures)})


def _thm3_instance(rng):
    mdp = random_instance(rng)
    S, A, g = mdp.num_states, mdp.num_actions, mdp.gamma
    delta = float(rng.choice(SHIFT_DELTAS))
    pi_k = TabularPolicy.random(S, A, rng)
    beta_k = TabularPolicy.random(S, A, rng)
    beta_k1 = perturb_policy(beta_k, delta * (1 - g), rng)
    q = noisy_q(evaluate_policy_exact(mdp, pi_k).q, g, rng)
    eps = dg.weighted_value_error(visitation_distribution(mdp, beta_k), q, evaluate_policy_exact(mdp, pi_k).q)
    return mdp, pi_k, beta_k, beta_k1, q, eps, delta


def suite_thm3(instances: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad, premise_failures = math.inf, 0, 0
    for _ in range(instances):
        mdp, pi_k, beta_k, beta_k1, q, eps, delta = _thm3_instance(rng)
        rep = dg.improvement_bound_report(mdp, pi_k, beta_k, beta_k1, q, eps, delta)
        premise_failures += not rep.premises_hold
        bad += not rep.satisfied
        worst = min(worst, rep.slack_lower)
    return SuiteResult("thm3", instances, int(bad + premise_failures), worst,
                       {"premise_failures": int(premise_failures)})


def suite_cpi_compare(instances: int = 200, seed: int = 0) -> SuiteResult:
    """Both lower bounds on matched instances, plus the CPI policy-change budget at gamma = 0.99."""
    rng = np.random.default_rng(seed)
    budget = dg.cpi_tv_budget(0.99)
    sv_wins, rows = 0, []
    for _ in range(instances):
        mdp, pi_k, beta_k, beta_k1, q, eps, delta = _thm3_instance(rng)
        g = mdp.gamma
        adv_hat = dg.estimated_expected_advantage(mdp, pi_k, beta_k1, q)
        v = evaluate_policy_exact(mdp, pi_k).v
        # best achievable estimated advantage: the greedy policy w.r.t. q
        best = float((visitation_distribution(mdp, _greedy(q)).d * (q - v[:, None])).sum())
        sv = dg.sv_lower_bound(adv_hat, eps, delta, g)
        cpi = dg.cpi_lower_bound(best, 0.0, delta, g)
        sv_wins += sv > cpi
        rows.append((sv, cpi))
    violations = int(not budget < 0.0025)
    return SuiteResult("cpi_compare", instances, violations, 0.0025 - budget,
                       {"cpi_tv_budget_gamma_0.99": budget, "sv_bound_larger": int(sv_wins)})


def _greedy(q):
    p = np.zeros_like(q)
    p[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return TabularPolicy(p)


def random_batch(rng: np.random.Generator, T: int, num_states: int = 6, num_actions: int = 3,
                 on_policy: bool = True):
    """A random time-major batch and target log-probs (equal to behavior when on-policy)."""
    states = rng.integers(num_states, size=T)
    actions = rng.integers(num_actions, size=T)
    behavior = np.log(rng.dirichlet(np.ones(num_actions), size=T))[np.arange(T), actions]
    target = behavior.copy() if on_policy else behavior + rng.normal(0, 0.5, size=T)
    batch = TransitionBatch(
        states=states,
        actions=actions,
        rewards=rng.random(T),
        next_states=np.roll(states, -1),
        terminals=rng.random(T) < 0.1,
        behavior_logprobs=behavior,
    )
    values = rng.normal(size=T + 1)
    return batch, target, values


def lambda_return_forward(rewards, values, terminals, gamma, lam):
    """Forward-view TD(lambda) targets as explicit sums of discounted TD errors."""
    T = len(rewards)
    cont = 1.0 - np.asarray(terminals, dtype=float)
    delta = rewards + gamma * cont * values[1:] - values[:-1]
    out = np.empty(T)
    for t in range(T):
        total, w = 0.0, 1.0
        for k in range(t, T):
            total += w * delta[k]
            if terminals[k]:
                break
            w *= gamma * lam
        out[t] = values[t] + total
    return out


def suite_estimators(instances: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst_err, bad = 0.0, 0
    for _ in range(instances):
        T = int(rng.integers(1, 60))
        gamma, lam = float(rng.uniform(0.5, 0.999)), float(rng.uniform(0, 1))
        rho_bar = float(rng.choice([1.0, 5.0, np.inf]))
        batch, target, values = random_batch(rng, T)
        y = vtrace_targets(batch, target, values, gamma, lam, rho_bar)
        adv = retrace_gae(batch, target, values, gamma, lam, rho_bar)
        y_ref = lambda_return_forward(batch.rewards, values, batch.terminals, gamma, lam)
        adv_ref = gae(batch.rewards, values, batch.terminals, gamma, lam)
        err = max(np.max(np.abs(y - y_ref)), np.max(np.abs(adv - adv_ref)))
        worst_err = max(worst_err, float(err))
        bad += err > 1e-10
    return SuiteResult("estimators", instances, int(bad), 1e-10 - worst_err)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def gradient_problem(rng: np.random.Generator, hidden: int = 8, num_states: int = 5, num_actions: int = 3,
                     n: int = 24, clip_eps: float = 0.2):
    """Random network, batch and old log-probs with ratios kept off the clip kinks."""
    ac = ActorCritic.create(one_hot_features(num_states), num_actions, hidden=hidden,
                            seed=int(rng.integers(2**31)), policy_output_gain=1.0)
    ac.policy_params = ac.policy_params + 0.3 * rng.standard_normal(ac.policy_params.shape)
    ac.value_params = ac.value_params + 0.3 * rng.standard_normal(ac.value_params.shape)
    states = rng.integers(num_states, size=n)
    actions = rng.integers(num_actions, size=n)
    logp = policy_logprobs(ac, ac, states, actions)
    old = logp + rng.normal(0, 0.3, size=n)
    ratio = np.exp(logp - old)
    for edge in (1 - clip_eps, 1 + clip_eps):
        near = np.abs(ratio - edge) < 1e-3
        old[near] -= 0.01
    adv = rng.standard_normal(n)
    targets = rng.standard_normal(n)
    return ac, states, actions, old, adv, targets


def suite_gradients(instances: int = 10, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, 0
    errs = {"surrogate": 0.0, "entropy": 0.0, "value": 0.0}
    for _ in range(instances):
        ac, s, a, old, adv, y = gradient_problem(rng)
        _, g, _ = ppo_policy_loss(ac, ac.policy_params, s, a, old, adv, 0.2, 0.0)
        fd = finite_difference(lambda p: ppo_policy_loss(ac, p, s, a, old, adv, 0.2, 0.0)[0], ac.policy_params)
        e_sur = relative_error(g, fd)
        _, g = entropy(ac, ac.policy_params, s)
        fd = finite_difference(lambda p: entropy(ac, p, s)[0], ac.policy_params)
        e_ent = relative_error(g, fd)
        _, g = value_loss(ac, ac.value_params, s, y)
        fd = finite_difference(lambda p: value_loss(ac, p, s, y)[0], ac.value_params)
        e_val = relative_error(g, fd)
        for k, e in zip(errs, (e_sur, e_ent, e_val)):
            errs[k] = max(errs[k], e)
            bad += e > 1e-4
            worst = max(worst, e)
    return SuiteResult("gradients", instances, int(bad), 1e-4 - worst, {"max_relative_error": errs})


def expected_gate(stable: bool, n_stable: int, k_pi: int, k_min: int, k_max: int):
    """Truth table of the gate written out case by case."""
    counter = n_stable + 1 if stable else 0
    if counter >= k_min:
        return True, 0
    if k_pi >= k_max:
        return True, 0
    return False, counter


def suite_gate(instances: int = 0, seed: int = 0) -> SuiteResult:
    """Exhaustive over stability, counters and (k_min, k_max) up to 5, with ties at the threshold."""
    cases, bad = 0, 0
    y_bar, delta_v = 2.0, 0.01
    threshold = y_bar * delta_v
    diffs = {"below": (threshold * 0.5, True), "equal": (threshold, True), "above": (threshold * 1.5, False)}
    for k_min, k_max in itertools.product(range(1, 6), range(1, 6)):
        if k_min > k_max:
            continue
        gate = GateConfig(delta_v=delta_v, k_min=k_min, k_max=k_max)
        for (diff, stable), n_stable, k_pi in itertools.product(diffs.values(), range(k_max + 2), range(k_max + 2)):
            cases += 1
            bad += conv(diff, y_bar, n_stable, k_pi, gate) != expected_gate(stable, n_stable, k_pi, k_min, k_max)
    # disabled threshold always counts as stable, even with zero returns
    gate = GateConfig(delta_v=math.inf, k_min=1, k_max=1)
    cases += 1
    bad += conv(5.0, 0.0, 0, 0, gate) != (True, 0)
    return SuiteResult("gate", cases, int(bad), 0.0 if bad == 0 else -1.0)


SUITES = {
    "pdl": (suite_pdl, 200),
    "thm1": (suite_thm1, 200),
    "lemma1": (suite_lemma1, 500),
    "lemma2": (suite_lemma2, 200),
    "thm3": (suite_thm3, 200),
    "cpi_compare": (suite_cpi_compare, 200),
    "estimators": (suite_estimators, 100),
    "gradients": (suite_gradients, 10),
    "gate": (suite_gate, 0),
}


def run_suite(name: str, instances=None, seed: int = 0) -> SuiteResult:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    fn, default = SUITES[name]
    return fn(default if instances is None else instances, seed)
