"""V-trace value targets and Retrace-weighted GAE advantages.

All inputs are time-major: ``rewards``/``logprobs``/``terminals`` have shape
``(T, ...)`` and ``values`` has shape ``(T + 1, ...)`` where ``values[T]`` is
the bootstrap value of the state following the last step. A terminal flag at
step ``t`` masks both the bootstrap ``v(s_{t+1})`` and the recursive tail.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import TransitionBatch


@dataclass(frozen=True)
class IsWeights:
    rho: np.ndarray
    c: np.ndarray


def _check(batch: TransitionBatch, target_logprobs, values=None):
    target_logprobs = np.asarray(target_logprobs, dtype=float)
    shape = np.shape(batch.rewards)
    if target_logprobs.shape != shape:
        raise ValueError(f"target_logprobs shape {target_logprobs.shape} != batch shape {shape}")
    if not np.all(np.isfinite(target_logprobs)):
        raise ValueError("target_logprobs must be finite")
    if values is not None:
        values = np.asarray(values, dtype=float)
        if values.shape != (shape[0] + 1,) + shape[1:]:
            raise ValueError(f"values must have shape {(shape[0] + 1,) + shape[1:]}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("values must be finite")
    return target_logprobs, values


def is_weights(target_logprobs, behavior_logprobs, lam: float, rho_bar: float) -> IsWeights:
    """Truncated ratios ``rho = min(rho_bar, pi/beta)`` and ``c = min(lam, pi/beta)``."""
    log_ratio = np.asarray(target_logprobs, dtype=float) - np.asarray(behavior_logprobs, dtype=float)
    # any ratio above e^700 is clipped anyway; capping the exponent avoids overflow
    ratio = np.exp(np.minimum(log_ratio, 700.0))
    return IsWeights(rho=np.minimum(rho_bar, ratio), c=np.minimum(lam, ratio))


def td_errors(rewards, values, terminals, gamma: float) -> np.ndarray:
    """``delta_t = r_t + gamma (1 - done_t) v(s_{t+1}) - v(s_t)``."""
    values = np.asarray(values, dtype=float)
    cont = 1.0 - np.asarray(terminals, dtype=float)
    return np.asarray(rewards, dtype=float) + gamma * cont * values[1:] - values[:-1]


def _backward(delta, weights, terminals, gamma):
    # acc_t = delta_t + gamma * c_t * (1 - done_t) * acc_{t+1},  acc_T = 0
    cont = 1.0 - np.asarray(terminals, dtype=float)
    out = np.empty_like(delta)
    acc = np.zeros_like(delta[0])
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + gamma * weights[t] * cont[t] * acc
        out[t] = acc
    return out


def vtrace_targets(
    batch: TransitionBatch,
    target_logprobs,
    values,
    gamma: float,
    lam: float,
    rho_bar: float,
) -> np.ndarray:
    """V-trace targets ``y_t = v(s_t) + rho_t delta_t + gamma c_t (y_{t+1} - v(s_{t+1}))``.

    The recursion is carried on ``y_t - v(s_t)`` so that ``y_{T} = v(s_T)``
    holds exactly for the bootstrap step.
    """
    target_logprobs, values = _check(batch, target_logprobs, values)
    w = is_weights(target_logprobs, batch.behavior_logprobs, lam, rho_bar)
    delta = td_errors(batch.rewards, values, batch.terminals, gamma)
    # rho weights only the current step's TD error; c carries the tail
    corr = _backward(w.rho * delta, w.c, batch.terminals, gamma)
    return values[:-1] + corr


def retrace_gae(
    batch: TransitionBatch,
    target_logprobs,
    values,
    gamma: float,
    lam: float,
    rho_bar: float,
) -> np.ndarray:
    """Advantages ``A_t = delta_t + gamma c_t A_{t+1}`` with ``A_{T} = 0`` (before scaling)."""
    target_logprobs, values = _check(batch, target_logprobs, values)
    w = is_weights(target_logprobs, batch.behavior_logprobs, lam, rho_bar)
    delta = td_errors(batch.rewards, values, batch.terminals, gamma)
    return _backward(delta, w.c, batch.terminals, gamma)


def scale_advantages(advantages) -> np.ndarray:
    """Divide by the batch (population) standard deviation without centering.

    A zero standard deviation leaves the input unchanged.
    """
    adv = np.asarray(advantages, dtype=float)
    if adv.size == 0:
        raise ValueError("cannot scale an empty advantage batch")
    std = adv.std()
    if std == 0.0 or not np.isfinite(std):
        return adv.copy()
    return adv / std
