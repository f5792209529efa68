"""Exact checks of the improvement bounds and per-round learning metrics.

Bound reports compare an exactly computed quantity against a lower and upper
bound. Action-value estimates are clamped into ``[0, 1/(1-gamma)]`` first, so
the bounded-error premise ``|Q - q| <= 1/(1-gamma)`` always holds.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .mdp import TabularMdp, TabularPolicy, TransitionBatch
from .oracle import evaluate_policy_exact, tv_distance, visitation_distribution

BOUND_TOL = 1e-8


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class BoundReport:
    lower: float
    actual: float
    upper: float
    satisfied: bool
    slack_lower: float
    slack_upper: float
    premises_hold: bool = True
    tol: float = BOUND_TOL

    @classmethod
    def build(cls, lower, actual, upper, tol=BOUND_TOL, premises_hold=True) -> "BoundReport":
        lower, actual, upper = float(lower), float(actual), float(upper)
        return cls(
            lower=lower,
            actual=actual,
            upper=upper,
            satisfied=bool(lower - tol <= actual <= upper + tol),
            slack_lower=actual - lower,
            slack_upper=upper - actual,
            premises_hold=premises_hold,
            tol=tol,
        )

    @property
    def worst_slack(self) -> float:
        return min(self.slack_lower, self.slack_upper)

    def to_dict(self) -> dict:
        return asdict(self)


def _dist(mu) -> np.ndarray:
    return mu.d if hasattr(mu, "d") else np.asarray(mu, dtype=float)


def clamp_q(q_est, gamma: float) -> np.ndarray:
    return np.clip(np.asarray(q_est, dtype=float), 0.0, 1.0 / (1.0 - gamma))


def weighted_value_error(mu, q_est, q_true) -> float:
    """``sum_{s,a} mu(s,a) |Q(s,a) - q(s,a)|``."""
    mu = _dist(mu)
    q_est = np.asarray(q_est, dtype=float)
    q_true = np.asarray(q_true, dtype=float)
    if not mu.shape == q_est.shape == q_true.shape:
        raise ValueError(f"shape mismatch: {mu.shape}, {q_est.shape}, {q_true.shape}")
    return float((mu * np.abs(q_true - q_est)).sum())


def estimated_expected_advantage(mdp: TabularMdp, pi: TabularPolicy, pi_prime: TabularPolicy, q_est) -> float:
    """``E_{d^{pi'}}[q(s,a) - V^pi(s)]`` with exact ``d^{pi'}`` and ``V^pi``."""
    v = evaluate_policy_exact(mdp, pi).v
    d = visitation_distribution(mdp, pi_prime).d
    return float((d * (np.asarray(q_est, dtype=float) - v[:, None])).sum())


def value_gap_report(mdp: TabularMdp, pi: TabularPolicy, pi_prime: TabularPolicy, q_est,
                    clamp: bool = True, tol: float = BOUND_TOL) -> BoundReport:
    """Sandwich of the value gap by the estimated advantage plus/minus the next-policy error."""
    g = mdp.gamma
    if clamp:
        q_est = clamp_q(q_est, g)
    ev = evaluate_policy_exact(mdp, pi)
    ev_prime = evaluate_policy_exact(mdp, pi_prime)
    d_prime = visitation_distribution(mdp, pi_prime).d
    adv_hat = float((d_prime * (q_est - ev.v[:, None])).sum())
    err = weighted_value_error(d_prime, q_est, ev.q)
    gap = ev_prime.v[mdp.initial_state] - ev.v[mdp.initial_state]
    return BoundReport.build((adv_hat - err) / (1 - g), gap, (adv_hat + err) / (1 - g), tol)


def error_transfer_report(mu, mu_prime, q_est, q_true, gamma: float, tol: float = 1e-10) -> BoundReport:
    """``eps(mu') <= eps(mu) + 2/(1-gamma) TV(mu', mu)``; one sided, so ``lower = -inf``."""
    q_est = clamp_q(q_est, gamma)
    mu, mu_prime = _dist(mu), _dist(mu_prime)
    upper = weighted_value_error(mu, q_est, q_true) + 2.0 / (1.0 - gamma) * tv_distance(mu_prime, mu)
    return BoundReport.build(-math.inf, weighted_value_error(mu_prime, q_est, q_true), upper, tol)


def per_state_tv(p: TabularPolicy, q: TabularPolicy) -> np.ndarray:
    return 0.5 * np.abs(p.probs - q.probs).sum(axis=1)


def npa_check(mdp: TabularMdp, beta_k: TabularPolicy, beta_k1: TabularPolicy, delta: float,
              tol: float = BOUND_TOL):
    """Premise ``max_s TV(beta_k(s), beta_k1(s)) <= delta (1 - gamma)`` and the visitation TV.

    Raises :class:`BoundViolation` if the premise holds but the visitation
    distributions are further apart than ``delta``.
    """
    ok = bool(per_state_tv(beta_k, beta_k1).max() <= delta * (1.0 - mdp.gamma) + 1e-15)
    tv = tv_distance(visitation_distribution(mdp, beta_k).d, visitation_distribution(mdp, beta_k1).d)
    if ok and tv > delta + tol:
        raise BoundViolation(f"visitation TV {tv:.3e} exceeds delta {delta:.3e}")
    return ok, tv


def improvement_bound_report(mdp: TabularMdp, pi_k: TabularPolicy, beta_k: TabularPolicy, beta_k1: TabularPolicy,
                    q_est, epsilon_bound: float, delta: float, tol: float = BOUND_TOL) -> BoundReport:
    """Lower bound on ``V^{beta_{k+1}}(s0) - V^{pi_k}(s0)`` when the target becomes ``beta_{k+1}``.

    ``q_est`` estimates ``Q^{pi_k}`` and is trained on ``mu_k = d^{beta_k}``.
    ``premises_hold`` is False when the per-state TV or training-error
    premise fails; ``satisfied`` still reports the raw inequality.
    """
    g = mdp.gamma
    q_est = clamp_q(q_est, g)
    ev = evaluate_policy_exact(mdp, pi_k)
    mu_k = visitation_distribution(mdp, beta_k).d
    premises = (
        per_state_tv(beta_k, beta_k1).max() <= delta * (1.0 - g) + 1e-15
        and weighted_value_error(mu_k, q_est, ev.q) <= epsilon_bound
    )
    adv_hat = estimated_expected_advantage(mdp, pi_k, beta_k1, q_est)
    gap = evaluate_policy_exact(mdp, beta_k1).v[mdp.initial_state] - ev.v[mdp.initial_state]
    lower = (adv_hat - epsilon_bound - 2.0 * delta / (1.0 - g)) / (1.0 - g)
    return BoundReport.build(lower, gap, math.inf, tol, premises_hold=bool(premises))


def cpi_lower_bound(max_advantage: float, greedy_error: float, delta: float, gamma: float) -> float:
    """Improvement guaranteed by a CPI mixture step with coefficient ``delta (1 - gamma)``."""
    return (delta * (1 - gamma) * (max_advantage - greedy_error) - 2 * delta ** 2 * gamma) / (1 - gamma)


def sv_lower_bound(advantage: float, epsilon: float, delta: float, gamma: float) -> float:
    """Improvement guaranteed by an unconstrained target update after delta-NPA."""
    return (advantage - epsilon - 2 * delta / (1 - gamma)) / (1 - gamma)


def cpi_tv_budget(gamma: float, max_advantage: float = 1.0, greedy_error: float = 0.0,
                  grid_size: int = 200_001, grid_max: float = 0.05) -> float:
    """Largest per-state policy TV on a grid for which the CPI bound stays positive.

    A mixture coefficient ``alpha`` moves each state's action distribution by
    at most ``alpha`` in TV; the bound is written in ``delta = alpha / (1 - gamma)``.
    """
    alpha = np.linspace(0.0, grid_max, grid_size)[1:]
    bound = cpi_lower_bound(max_advantage, greedy_error, alpha / (1 - gamma), gamma)
    ok = alpha[bound > 0]
    return float(ok.max()) if ok.size else 0.0


def kl_per_state(p: TabularPolicy, q: TabularPolicy) -> np.ndarray:
    """``KL(p(s) || q(s))`` for every state."""
    pp, qq = p.probs, q.probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pp > 0, pp * (np.log(pp) - np.log(qq)), 0.0)
    return terms.sum(axis=1)


def empirical_distribution(batch: TransitionBatch, num_states: int, num_actions: int,
                           gamma: Optional[float] = None) -> np.ndarray:
    """State-action frequencies of a batch.

    With ``gamma`` each step is weighted by ``gamma ** t`` (``t`` = steps into
    its episode) and normalized, which estimates the discounted visitation
    distribution rather than the plain frequency.
    """
    s = np.asarray(batch.states).ravel()
    a = np.asarray(batch.actions).ravel()
    w = np.ones(s.shape) if gamma is None else gamma ** np.asarray(batch.timesteps).ravel().astype(float)
    d = np.zeros((num_states, num_actions))
    np.add.at(d, (s, a), w)
    return d / d.sum()


def round_metrics(mdp: TabularMdp, target_policy: TabularPolicy, prev_behavior: TabularPolicy,
                  new_behavior: TabularPolicy, v_est, prev_target: Optional[TabularPolicy] = None,
                  new_target: Optional[TabularPolicy] = None, visited=None) -> dict:
    """Learning-dynamics metrics for one round, from exact quantities.

    ``value_error_sq`` is the next-policy weighted squared state-value error
    ``E_{mu_{k+1}}(V^pi(s) - v_k(s))^2`` with ``mu_{k+1} = d^{beta_{k+1}}``;
    ``value_error_abs`` is the same weighting of the absolute error.
    """
    ev_target = evaluate_policy_exact(mdp, target_policy)
    mu_prev = visitation_distribution(mdp, prev_behavior)
    mu_next = visitation_distribution(mdp, new_behavior)
    err = ev_target.v - np.asarray(v_est, dtype=float)
    out = {
        "value_error_sq": float((mu_next.states * err ** 2).sum()),
        "value_error_abs": float((mu_next.states * np.abs(err)).sum()),
        "tv_mu": tv_distance(mu_prev.d, mu_next.d),
        "v_behavior": float(evaluate_policy_exact(mdp, prev_behavior).v[mdp.initial_state]),
        "v_target": float(ev_target.v[mdp.initial_state]),
    }
    states = np.arange(mdp.num_states) if visited is None else np.unique(visited)
    out["kl_behavior"] = float(kl_per_state(prev_behavior, new_behavior)[states].mean())
    if prev_target is not None and new_target is not None:
        out["kl_target"] = float(kl_per_state(prev_target, new_target)[states].mean())
    return out
