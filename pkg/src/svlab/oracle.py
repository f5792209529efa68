"""Exact tabular policy evaluation, visitation distributions and value iteration.

Everything here is a dense linear solve or a direct sum; these functions are
the ground truth the estimators, approximators and bound checks are tested
against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from .mdp import TabularMdp, TabularPolicy

BELLMAN_RESIDUAL_TOL = 1e-10
PDL_TOL = 1e-8
TIE_TOL = 1e-9
# above this many states fall back to a sparse solver
DENSE_SOLVE_LIMIT = 10_000


class OracleError(RuntimeError):
    """An identity that must hold exactly was violated."""


@dataclass(frozen=True)
class ExactEvaluation:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray


@dataclass(frozen=True)
class VisitationDistribution:
    """Discounted state-action visitation ``d[s, a]``, summing to one."""

    d: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return self.d.sum(axis=1)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    if A.shape[0] <= DENSE_SOLVE_LIMIT:
        return linalg.solve(A, b)
    return spsolve(csr_matrix(A), b)


def policy_transition(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """State-to-state matrix ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)``."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def evaluate_policy_exact(mdp: TabularMdp, policy: TabularPolicy) -> ExactEvaluation:
    policy.check_against(mdp)
    g = mdp.gamma
    P_pi = policy_transition(mdp, policy)
    r_pi = (policy.probs * mdp.reward).sum(axis=1)
    v = _solve(np.eye(mdp.num_states) - g * P_pi, r_pi)
    q = mdp.reward + g * mdp.transition @ v
    v = (policy.probs * q).sum(axis=1)
    residual = np.max(np.abs(mdp.reward + g * mdp.transition @ v - q))
    if residual > BELLMAN_RESIDUAL_TOL:
        raise OracleError(f"Bellman residual {residual:.3e} exceeds {BELLMAN_RESIDUAL_TOL}")
    return ExactEvaluation(v=v, q=q, adv=q - v[:, None])


def q_fixed_point(mdp: TabularMdp, policy: TabularPolicy, num_iters: int) -> np.ndarray:
    """Iterate ``Q <- r + gamma P pi Q`` from zero; slow reference for the solve."""
    q = np.zeros_like(mdp.reward)
    for _ in range(num_iters):
        v = (policy.probs * q).sum(axis=1)
        q = mdp.reward + mdp.gamma * mdp.transition @ v
    return q


def visitation_distribution(mdp: TabularMdp, policy: TabularPolicy) -> VisitationDistribution:
    policy.check_against(mdp)
    g = mdp.gamma
    P_pi = policy_transition(mdp, policy)
    start = np.zeros(mdp.num_states)
    start[mdp.initial_state] = 1.0
    # d_s = (1 - g) start + g P_pi^T d_s
    d_s = (1.0 - g) * _solve(np.eye(mdp.num_states) - g * P_pi.T, start)
    d_s = np.clip(d_s, 0.0, None)
    return VisitationDistribution(d_s[:, None] * policy.probs)


def truncated_visitation(mdp: TabularMdp, policy: TabularPolicy, horizon: int) -> np.ndarray:
    """``(1 - gamma) sum_{t<=horizon} gamma^t P(s_t=s, a_t=a)`` by forward propagation."""
    P_pi = policy_transition(mdp, policy)
    p = np.zeros(mdp.num_states)
    p[mdp.initial_state] = 1.0
    d = np.zeros(mdp.num_states)
    disc = 1.0
    for _ in range(horizon + 1):
        d += disc * p
        p = p @ P_pi
        disc *= mdp.gamma
    return (1.0 - mdp.gamma) * d[:, None] * policy.probs


def greedy_policy(q: np.ndarray, tie_tol: float = TIE_TOL) -> TabularPolicy:
    """Uniform over actions whose value is within ``tie_tol`` of the best."""
    best = q.max(axis=1, keepdims=True)
    ties = (q >= best - tie_tol).astype(float)
    return TabularPolicy(ties / ties.sum(axis=1, keepdims=True))


def value_iteration(mdp: TabularMdp, num_iters: int = 10_000, tie_tol: float = TIE_TOL):
    """Bellman optimality iteration; returns ``(V*, greedy policy)``."""
    if num_iters < 1:
        raise ValueError("num_iters must be at least 1")
    v = np.zeros(mdp.num_states)
    for _ in range(num_iters):
        v_new = (mdp.reward + mdp.gamma * mdp.transition @ v).max(axis=1)
        if np.array_equal(v_new, v):
            break
        v = v_new
    q = mdp.reward + mdp.gamma * mdp.transition @ v
    return v, greedy_policy(q, tie_tol)


def performance_difference(mdp: TabularMdp, pi: TabularPolicy, pi_prime: TabularPolicy) -> float:
    """``V^{pi'}(s0) - V^pi(s0)`` via the advantage of ``pi`` under ``d^{pi'}``.

    The value gap is also computed directly and the two must agree to
    ``PDL_TOL``; a mismatch means the oracle itself is broken.
    """
    ev = evaluate_policy_exact(mdp, pi)
    d_prime = visitation_distribution(mdp, pi_prime).d
    via_adv = float((d_prime * ev.adv).sum()) / (1.0 - mdp.gamma)
    direct = float(evaluate_policy_exact(mdp, pi_prime).v[mdp.initial_state] - ev.v[mdp.initial_state])
    if abs(via_adv - direct) > PDL_TOL:
        raise OracleError(f"performance difference identity off by {abs(via_adv - direct):.3e}")
    return via_adv


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def reset_chain_stationary(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """Stationary ``(s, a)`` distribution of the chain that jumps back to s0 on termination.

    This is the long-run frequency an auto-resetting rollout converges to.
    """
    P_pi = policy_transition(mdp, policy).copy()
    term = mdp.terminal_mask
    # mass that would enter a terminal state goes to the start state instead
    to_term = P_pi[:, term].sum(axis=1)
    P_pi[:, term] = 0.0
    P_pi[:, mdp.initial_state] += to_term
    reachable = ~term
    M = P_pi[np.ix_(reachable, reachable)]
    n = M.shape[0]
    A = np.vstack([M.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(A, b, rcond=None)
    d_s = np.zeros(mdp.num_states)
    d_s[reachable] = np.clip(mu, 0.0, None)
    d_s /= d_s.sum()
    return d_s[:, None] * policy.probs
