"""Finite MDPs, tabular policies and seeded trajectory sampling.

An MDP here is the tuple ``(S, A, P, r, gamma, s0)`` stored densely:
``transition[s, a, s']`` and ``reward[s, a]`` with rewards in ``[0, 1]``.
Terminal states self-loop with probability one and zero reward, so the
discounted quantities computed by :mod:`svlab.oracle` coincide with the
episodic returns observed in rollouts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ROW_SUM_TOL = 1e-12

# Canonical Four Rooms layout, outer wall included ("#" wall, "." free).
FOUR_ROOMS_LAYOUT = (
    "#############",
    "#.....#.....#",
    "#.....#.....#",
    "#...........#",
    "#.....#.....#",
    "#.....#.....#",
    "##.####.....#",
    "#.....###.###",
    "#.....#.....#",
    "#.....#.....#",
    "#...........#",
    "#.....#.....#",
    "#############",
)
FOUR_ROOMS_START = (1, 1)
FOUR_ROOMS_GOAL = (11, 11)

# up, right, down, left as (drow, dcol)
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
ACTION_NAMES = ("up", "right", "down", "left")


@dataclass(frozen=True)
class TabularMdp:
    """Dense finite MDP."""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_state: int = 0
    terminal_states: frozenset = field(default_factory=frozenset)
    # optional (row, col) coordinates of each state for gridworlds
    coords: Optional[np.ndarray] = None
    grid_shape: Optional[tuple] = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "terminal_states", frozenset(int(s) for s in self.terminal_states))
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise ValueError(f"reward shape {r.shape} does not match transition {P.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError("need at least one state and one action")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(r < 0) or np.any(r > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0 <= self.initial_state < P.shape[0]:
            raise ValueError("initial_state out of range")
        for s in self.terminal_states:
            if P[s, :, s].min() < 1.0 - ROW_SUM_TOL or np.any(r[s] != 0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    def to_json(self) -> str:
        """Serialize as shapes plus flat row-major arrays."""
        doc = {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.gamma,
            "initial_state": self.initial_state,
            "terminal_states": sorted(self.terminal_states),
            "transition": self.transition.ravel().tolist(),
            "reward": self.reward.ravel().tolist(),
        }
        if self.coords is not None:
            doc["coords"] = self.coords.ravel().tolist()
            doc["grid_shape"] = list(self.grid_shape)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        doc = json.loads(text)
        S, A = doc["num_states"], doc["num_actions"]
        coords = doc.get("coords")
        return cls(
            transition=np.array(doc["transition"], dtype=float).reshape(S, A, S),
            reward=np.array(doc["reward"], dtype=float).reshape(S, A),
            gamma=float(doc["gamma"]),
            initial_state=int(doc["initial_state"]),
            terminal_states=frozenset(doc["terminal_states"]),
            coords=None if coords is None else np.array(coords, dtype=int).reshape(S, 2),
            grid_shape=None if coords is None else tuple(doc["grid_shape"]),
        )

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return (
            np.array_equal(self.transition, other.transition)
            and np.array_equal(self.reward, other.reward)
            and self.gamma == other.gamma
            and self.initial_state == other.initial_state
            and self.terminal_states == other.terminal_states
        )

    __hash__ = None


@dataclass(frozen=True)
class TabularPolicy:
    """Per-state action distribution ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("probs must be a (S, A) array")
        if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "TabularPolicy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def random(cls, num_states: int, num_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        return cls(rng.dirichlet(np.ones(num_actions), size=num_states))

    def check_against(self, mdp: TabularMdp) -> None:
        if self.probs.shape != (mdp.num_states, mdp.num_actions):
            raise ValueError(
                f"policy shape {self.probs.shape} does not match MDP "
                f"({mdp.num_states}, {mdp.num_actions})"
            )


@dataclass
class TransitionBatch:
    """Time-major rollout data; arrays are shaped ``(T,)`` or ``(T, num_envs)``.

    ``timesteps`` counts steps since the episode began and ``final_states``
    holds where each environment resumes on the next call to :func:`rollout`.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    behavior_logprobs: np.ndarray
    timesteps: Optional[np.ndarray] = None
    final_states: Optional[np.ndarray] = None
    final_timesteps: Optional[np.ndarray] = None

    def __post_init__(self):
        shape = np.shape(self.states)
        for name in ("actions", "rewards", "next_states", "terminals", "behavior_logprobs"):
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")
        if self.timesteps is None:
            self.timesteps = np.zeros(shape, dtype=int)

    def __len__(self) -> int:
        return int(np.shape(self.states)[0])


def build_four_rooms(slip_prob: float = 0.8, gamma: float = 0.99) -> TabularMdp:
    """Four Rooms gridworld with start top-left and terminal goal bottom-right.

    With probability ``slip_prob`` the move goes in one of the three other
    directions, chosen uniformly. Bumping into a wall leaves the agent in
    place. Entering the goal pays 1; every other transition pays 0, so
    ``reward[s, a]`` is the probability that ``(s, a)`` reaches the goal.
    """
    if not 0.0 <= slip_prob <= 1.0:
        raise ValueError(f"slip_prob must be in [0, 1], got {slip_prob}")
    cells = [(i, j) for i, row in enumerate(FOUR_ROOMS_LAYOUT) for j, c in enumerate(row) if c != "#"]
    index = {c: k for k, c in enumerate(cells)}
    S, A = len(cells), len(MOVES)
    goal = index[FOUR_ROOMS_GOAL]

    def dest(cell, move):
        nxt = (cell[0] + move[0], cell[1] + move[1])
        return index.get(nxt, index[cell])

    P = np.zeros((S, A, S))
    for s, cell in enumerate(cells):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        for a in range(A):
            for b, move in enumerate(MOVES):
                p = 1.0 - slip_prob if b == a else slip_prob / (A - 1)
                P[s, a, dest(cell, move)] += p
    R = P[:, :, goal].copy()
    R[goal] = 0.0
    return TabularMdp(
        transition=P,
        reward=R,
        gamma=gamma,
        initial_state=index[FOUR_ROOMS_START],
        terminal_states=frozenset({goal}),
        coords=np.array(cells, dtype=int),
        grid_shape=(len(FOUR_ROOMS_LAYOUT), len(FOUR_ROOMS_LAYOUT[0])),
    )


def build_random_mdp(num_states: int, num_actions: int, gamma: float, seed: int) -> TabularMdp:
    """Dense random MDP: Dirichlet(1) transition rows, uniform(0, 1) rewards."""
    if num_states < 1 or num_actions < 1:
        raise ValueError("num_states and num_actions must be at least 1")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    # renormalize so rows sum to one to machine precision
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    return TabularMdp(transition=P, reward=R, gamma=gamma, initial_state=0)


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    # index of the first bin whose cumulative mass exceeds u
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


def rollout(
    mdp: TabularMdp,
    policy: TabularPolicy,
    horizon: int,
    num_envs: int,
    rng: np.random.Generator,
    start_states: Optional[Sequence[int]] = None,
    start_timesteps: Optional[Sequence[int]] = None,
) -> TransitionBatch:
    """Sample ``horizon`` steps in each of ``num_envs`` environments.

    Every environment draws from its own child generator spawned from ``rng``,
    so the batch does not depend on how environments are scheduled.
    Environments reset to ``mdp.initial_state`` after entering a terminal
    state. Returned arrays have shape ``(horizon, num_envs)``.
    """
    if horizon < 1 or num_envs < 1:
        raise ValueError("horizon and num_envs must be at least 1")
    policy.check_against(mdp)
    children = rng.spawn(num_envs)
    u_act = np.stack([g.random(horizon) for g in children], axis=1)
    u_next = np.stack([g.random(horizon) for g in children], axis=1)
    pi_cdf = np.cumsum(policy.probs, axis=1)
    P_cdf = np.cumsum(mdp.transition, axis=2)
    log_pi = np.log(policy.probs, where=policy.probs > 0, out=np.full(policy.probs.shape, -np.inf))
    terminal = mdp.terminal_mask

    shape = (horizon, num_envs)
    states = np.empty(shape, dtype=int)
    actions = np.empty(shape, dtype=int)
    next_states = np.empty(shape, dtype=int)
    timesteps = np.empty(shape, dtype=int)
    s = np.full(num_envs, mdp.initial_state) if start_states is None else np.array(start_states, dtype=int)
    tau = np.zeros(num_envs, dtype=int) if start_timesteps is None else np.array(start_timesteps, dtype=int)
    for t in range(horizon):
        a = _inverse_cdf(pi_cdf[s], u_act[t])
        s2 = _inverse_cdf(P_cdf[s, a], u_next[t])
        states[t], actions[t], next_states[t], timesteps[t] = s, a, s2, tau
        done = terminal[s2]
        s = np.where(done, mdp.initial_state, s2)
        tau = np.where(done, 0, tau + 1)
    return TransitionBatch(
        states=states,
        actions=actions,
        rewards=mdp.reward[states, actions],
        next_states=next_states,
        terminals=terminal[next_states],
        behavior_logprobs=log_pi[states, actions],
        timesteps=timesteps,
        final_states=s,
        final_timesteps=tau,
    )
