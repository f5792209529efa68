"""Small numpy actor-critic with hand-written gradients.

Policy and value are separate networks with one tanh hidden layer (or none,
for a purely linear model) over a fixed state feature matrix. Parameters live
in flat float64 vectors so that snapshots, optimizer state and checkpoints
are plain arrays.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.sparse import csr_matrix

from .mdp import TabularMdp, TabularPolicy


class NonFiniteLossError(FloatingPointError):
    pass


class Mlp:
    """Shape bookkeeping and forward/backward passes for a one-hidden-layer net.

    ``hidden == 0`` gives a linear map ``features @ W + b``.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        if hidden > 0:
            self.shapes = [(in_dim, hidden), (hidden,), (hidden, out_dim), (out_dim,)]
        else:
            self.shapes = [(in_dim, out_dim), (out_dim,)]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.size = sum(self.sizes)

    def unpack(self, params: np.ndarray):
        out, i = [], 0
        for shape, n in zip(self.shapes, self.sizes):
            out.append(params[i:i + n].reshape(shape))
            i += n
        return out

    def init(self, rng: np.random.Generator, hidden_gain: float, output_gain: float) -> np.ndarray:
        mats = []
        for k, shape in enumerate(self.shapes):
            if len(shape) == 1:
                mats.append(np.zeros(shape))
                continue
            last = k == len(self.shapes) - 2
            mats.append(_orthogonal(rng, shape, output_gain if last else hidden_gain))
        return np.concatenate([m.ravel() for m in mats])

    def forward(self, params: np.ndarray, features: np.ndarray, rows: np.ndarray):
        """Outputs for ``features[rows]``.

        The network is evaluated once on the feature table and the result
        gathered, so repeated rows cost nothing and always agree bitwise.
        """
        if self.hidden > 0:
            W1, b1, W2, b2 = self.unpack(params)
            h = np.tanh(features @ W1 + b1)
            return (h @ W2 + b2)[rows], (features, rows, h)
        W, b = self.unpack(params)
        return (features @ W + b)[rows], (features, rows, None)

    def backward(self, params: np.ndarray, cache, grad_out: np.ndarray) -> np.ndarray:
        features, rows, h = cache
        g = _scatter_rows(grad_out, rows, features.shape[0])
        if self.hidden > 0:
            _, _, W2, _ = self.unpack(params)
            gW2 = h.T @ g
            gb2 = g.sum(axis=0)
            gz = (g @ W2.T) * (1.0 - h * h)
            gW1 = features.T @ gz
            gb1 = gz.sum(axis=0)
            return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
        return np.concatenate([(features.T @ g).ravel(), g.sum(axis=0)])


def _scatter_rows(values: np.ndarray, rows: np.ndarray, n: int) -> np.ndarray:
    """``out[j] = sum of values[i] over i with rows[i] == j``."""
    m = len(rows)
    gather = csr_matrix((np.ones(m), (rows, np.arange(m))), shape=(n, m))
    return np.asarray(gather @ values)


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    if gain == 0.0:
        return np.zeros(shape)
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of policy parameters (the frozen target policy)."""

    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=float, copy=True)
        p.setflags(write=False)
        object.__setattr__(self, "params", p)


@dataclass
class ActorCritic:
    features: np.ndarray
    policy_net: Mlp
    value_net: Mlp
    policy_params: np.ndarray
    value_params: np.ndarray

    @classmethod
    def create(
        cls,
        features: np.ndarray,
        num_actions: int,
        hidden: int = 64,
        seed: int = 0,
        policy_output_gain: float = 0.01,
        value_output_gain: float = 1.0,
        hidden_gain: float = np.sqrt(2.0),
    ) -> "ActorCritic":
        features = np.asarray(features, dtype=float)
        rng = np.random.default_rng(seed)
        pnet = Mlp(features.shape[1], hidden, num_actions)
        vnet = Mlp(features.shape[1], hidden, 1)
        return cls(
            features=features,
            policy_net=pnet,
            value_net=vnet,
            policy_params=pnet.init(rng, hidden_gain, policy_output_gain),
            value_params=vnet.init(rng, hidden_gain, value_output_gain),
        )

    @property
    def num_states(self) -> int:
        return self.features.shape[0]

    def snapshot(self) -> Snapshot:
        return Snapshot(self.policy_params)

    def values(self, states) -> np.ndarray:
        out, _ = self.value_net.forward(self.value_params, self.features, np.asarray(states).ravel())
        return out[:, 0].reshape(np.shape(states))


PolicySource = Union[ActorCritic, Snapshot]


def _policy_params(source: PolicySource) -> np.ndarray:
    return source.policy_params if isinstance(source, ActorCritic) else source.params


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def state_logprobs(ac: ActorCritic, source: PolicySource, states=None) -> np.ndarray:
    """Log action probabilities ``(N, A)`` for ``states`` (all states by default)."""
    rows = np.arange(ac.num_states) if states is None else np.asarray(states).ravel()
    logits, _ = ac.policy_net.forward(_policy_params(source), ac.features, rows)
    return log_softmax(logits)


def policy_logprobs(ac: ActorCritic, source: PolicySource, states, actions) -> np.ndarray:
    """Log-probabilities of ``actions`` at ``states`` under ``source``'s parameters.

    Evaluates the network once per distinct state, so the result for a given
    ``(s, a)`` is identical wherever it appears in a batch.
    """
    table = state_logprobs(ac, source)
    return table[np.asarray(states), np.asarray(actions)]


def project_to_tabular(ac: ActorCritic, source: Optional[PolicySource] = None,
                       mdp: Optional[TabularMdp] = None) -> TabularPolicy:
    """Evaluate the policy network on every state."""
    if mdp is not None and mdp.num_states != ac.num_states:
        raise ValueError("feature matrix does not cover the MDP's states")
    probs = np.exp(state_logprobs(ac, ac if source is None else source))
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def ppo_policy_loss(
    ac: ActorCritic,
    params: np.ndarray,
    states,
    actions,
    old_logprobs,
    advantages,
    clip_eps: float,
    entropy_coef: float,
):
    """Clipped surrogate with an entropy bonus, as a loss to minimize.

    The ratio compares ``params`` against ``old_logprobs``, which are the
    log-probabilities of the behavioral policy that collected the batch.
    Returns ``(loss, gradient, info)``.
    """
    states = np.asarray(states).ravel()
    actions = np.asarray(actions).ravel()
    old_logprobs = np.asarray(old_logprobs, dtype=float).ravel()
    adv = np.asarray(advantages, dtype=float).ravel()
    n = len(states)
    logits, cache = ac.policy_net.forward(params, ac.features, states)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = logp_all[np.arange(n), actions]
    ratio = np.exp(logp - old_logprobs)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    surrogate = np.minimum(unclipped_obj, clipped_obj)
    ent = -(p * logp_all).sum(axis=1)
    loss = -surrogate.mean() - entropy_coef * ent.mean()
    if not np.isfinite(loss):
        raise NonFiniteLossError("policy loss is not finite")

    # d surrogate / d logp_t is ratio * adv where the unclipped branch is the min
    active = unclipped_obj <= clipped_obj
    g_logp = np.where(active, ratio * adv, 0.0)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), actions] = 1.0
    g_logits = -(g_logp[:, None] * (onehot - p)) / n
    # dH/dlogits_j = -p_j (log p_j + H)
    g_logits += entropy_coef * (p * (logp_all + ent[:, None])) / n
    grad = ac.policy_net.backward(params, cache, g_logits)
    info = {
        "entropy": float(ent.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip_eps)),
        "approx_kl": float(np.mean(old_logprobs - logp)),
    }
    return float(loss), grad, info


def value_loss(ac: ActorCritic, params: np.ndarray, states, targets):
    """``0.5 * mean((y - v(s))^2)`` and its gradient."""
    states = np.asarray(states).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    out, cache = ac.value_net.forward(params, ac.features, states)
    err = out[:, 0] - y
    loss = 0.5 * float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NonFiniteLossError("value loss is not finite")
    grad = ac.value_net.backward(params, cache, (err / len(y))[:, None])
    return loss, grad


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grad
    return grad * (max_norm / norm)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def sgd_step(
    params: np.ndarray,
    gradient: np.ndarray,
    learning_rate: float,
    max_grad_norm: Optional[float],
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam step on the globally norm-clipped gradient.

    Pure: returns ``(new_params, new_state)`` and leaves the inputs untouched.
    A zero gradient on a fresh state leaves the parameters unchanged.
    """
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    g = clip_by_global_norm(gradient, max_grad_norm)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - learning_rate * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def entropy(ac: ActorCritic, params: np.ndarray, states):
    """Mean policy entropy over ``states`` and its gradient."""
    states = np.asarray(states).ravel()
    logits, cache = ac.policy_net.forward(params, ac.features, states)
    logp = log_softmax(logits)
    p = np.exp(logp)
    ent = -(p * logp).sum(axis=1)
    g_logits = -(p * (logp + ent[:, None])) / len(states)
    return float(ent.mean()), ac.policy_net.backward(params, cache, g_logits)


# checkpoints: a JSON header line followed by raw little-endian float64 data

def save_checkpoint(path, ac: ActorCritic) -> None:
    header = {
        "policy": {"in": ac.policy_net.in_dim, "hidden": ac.policy_net.hidden,
                   "out": ac.policy_net.out_dim, "size": ac.policy_net.size},
        "value": {"in": ac.value_net.in_dim, "hidden": ac.value_net.hidden,
                  "out": ac.value_net.out_dim, "size": ac.value_net.size},
        "dtype": "<f8",
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(ac.policy_params, dtype="<f8").tobytes())
        fh.write(np.asarray(ac.value_params, dtype="<f8").tobytes())


def load_checkpoint(path, features: np.ndarray) -> ActorCritic:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        data = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    hp, hv = header["policy"], header["value"]
    pnet = Mlp(hp["in"], hp["hidden"], hp["out"])
    vnet = Mlp(hv["in"], hv["hidden"], hv["out"])
    if len(data) != pnet.size + vnet.size:
        raise ValueError("checkpoint size does not match its header")
    return ActorCritic(features=np.asarray(features, dtype=float), policy_net=pnet, value_net=vnet,
                       policy_params=data[:pnet.size].copy(), value_params=data[pnet.size:].copy())


def one_hot_features(num_states: int) -> np.ndarray:
    return np.eye(num_states)
