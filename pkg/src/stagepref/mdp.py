"""Finite tabular MDPs: containers, rollouts, Q-learning, and the staged chain generator.

Conventions used throughout the package:

* states and actions are integer ids starting at 0;
* ``transition`` has shape (S, A, S) with rows summing to 1;
* terminal states are absorbing (every action self-loops with reward 0) and
  rollouts stop upon entering one;
* a trajectory stores one entry per executed step, so ``states[t]`` is the
  state the action ``actions[t]`` was taken from, and ``final_state`` is the
  state the last step landed in.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateScaleError

_ROW_TOL = 1e-9


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Seeded PCG64 generator; every stochastic routine takes one of these."""
    return np.random.default_rng(seed)


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    # inverse-CDF draw; clip guards the cumsum landing at 1 - eps
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random(), side="right"), len(probs) - 1))


@dataclass
class TabularMdp:
    """Dense finite MDP with explicit terminal mask."""

    transition: np.ndarray
    true_reward: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    terminal: np.ndarray

    def __post_init__(self) -> None:
        self.transition = np.asarray(self.transition, dtype=float)
        self.true_reward = np.asarray(self.true_reward, dtype=float)
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self) -> None:
        s, a = self.true_reward.shape
        if self.transition.shape != (s, a, s):
            raise ValueError(f"transition shape {self.transition.shape} != {(s, a, s)}")
        if self.initial_dist.shape != (s,) or self.terminal.shape != (s,):
            raise ValueError("initial_dist/terminal must have one entry per state")
        if not (0.0 < self.gamma < 1.0):
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(self.transition < -_ROW_TOL):
            raise ValueError("transition probabilities must be nonnegative")
        rows = self.transition.sum(axis=2)
        if np.max(np.abs(rows - 1.0)) > _ROW_TOL:
            raise ValueError("transition rows must sum to 1")
        if abs(self.initial_dist.sum() - 1.0) > _ROW_TOL or np.any(self.initial_dist < 0):
            raise ValueError("initial_dist must be a probability vector")
        if not np.all(np.isfinite(self.true_reward)):
            raise ValueError("rewards must be finite")
        for t in np.flatnonzero(self.terminal):
            if not np.allclose(self.transition[t, :, t], 1.0, atol=_ROW_TOL):
                raise ValueError(f"terminal state {t} must self-loop under every action")
            if np.max(np.abs(self.true_reward[t])) > _ROW_TOL:
                raise ValueError(f"terminal state {t} must have zero reward")

    def to_json_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": [float(v) for v in self.transition.ravel(order="C")],
            "true_reward": [float(v) for v in self.true_reward.ravel(order="C")],
            "initial_dist": [float(v) for v in self.initial_dist],
            "gamma": float(self.gamma),
            "terminal": [bool(v) for v in self.terminal],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TabularMdp":
        s, a = int(d["n_states"]), int(d["n_actions"])
        return cls(
            transition=np.asarray(d["transition"], dtype=float).reshape(s, a, s),
            true_reward=np.asarray(d["true_reward"], dtype=float).reshape(s, a),
            initial_dist=np.asarray(d["initial_dist"], dtype=float),
            gamma=float(d["gamma"]),
            terminal=np.asarray(d["terminal"], dtype=bool),
        )

    def save_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True)

    @classmethod
    def load_json(cls, path: str) -> "TabularMdp":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class Trajectory:
    """One rollout; arrays share a common length equal to the number of steps."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_state: int
    policy_version: int = 0

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=int)
        self.actions = np.asarray(self.actions, dtype=int)
        self.rewards = np.asarray(self.rewards, dtype=float)
        if not (len(self.states) == len(self.actions) == len(self.rewards)):
            raise ValueError("states/actions/rewards must have equal length")

    def __len__(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class Segment:
    """Contiguous slice of a stored trajectory; endpoints cached for pair scoring."""

    source: int
    start: int
    length: int
    first_state: int
    last_state: int


def make_segment(source: int, traj: Trajectory, start: int, length: int) -> Segment:
    if length < 1 or start < 0 or start + length > len(traj):
        raise ValueError(f"segment [{start}, {start + length}) out of range for length {len(traj)}")
    return Segment(
        source=source,
        start=start,
        length=length,
        first_state=int(traj.states[start]),
        last_state=int(traj.states[start + length - 1]),
    )


def segment_arrays(traj: Trajectory, seg: Segment) -> tuple[np.ndarray, np.ndarray]:
    """Resolve a segment back to its (states, actions) step arrays."""
    sl = slice(seg.start, seg.start + seg.length)
    return traj.states[sl], traj.actions[sl]


def rollout(
    mdp: TabularMdp,
    policy: np.ndarray,
    horizon: int,
    rng: np.random.Generator,
    policy_version: int = 0,
    start: int | None = None,
) -> Trajectory:
    """Sample a trajectory of at most ``horizon`` steps, stopping at terminal states.

    ``start`` overrides the MDP's initial distribution (exploring starts).
    """
    if horizon < 1:
        raise ValueError("horizon must be positive")
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError("policy must be an (S, A) distribution table")
    if start is not None and not (0 <= start < mdp.n_states):
        raise ValueError(f"start state {start} out of range")
    s = int(start) if start is not None else _sample_index(mdp.initial_dist, rng)
    states, actions, rewards = [], [], []
    for _ in range(horizon):
        if mdp.terminal[s]:
            break
        a = _sample_index(policy[s], rng)
        states.append(s)
        actions.append(a)
        rewards.append(float(mdp.true_reward[s, a]))
        s = _sample_index(mdp.transition[s, a], rng)
    return Trajectory(
        states=np.array(states, dtype=int),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards, dtype=float),
        final_state=int(s),
        policy_version=policy_version,
    )


def value_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q table; the reference oracle Q-learning is tested against."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    live = ~mdp.terminal
    for _ in range(max_iter):
        v = np.where(live, q.max(axis=1), 0.0)
        q_new = mdp.true_reward + mdp.gamma * mdp.transition @ v
        q_new[mdp.terminal] = 0.0
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    return q


def q_learning_update(
    q: np.ndarray,
    s: int,
    a: int,
    r: float,
    s_next: int,
    alpha: float,
    gamma: float,
    terminal_next: bool,
) -> np.ndarray:
    """Single tabular TD(0) backup, in place."""
    bootstrap = 0.0 if terminal_next else gamma * float(np.max(q[s_next]))
    q[s, a] += alpha * (r + bootstrap - q[s, a])
    return q


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic argmax policy; ties go to the lowest action id."""
    policy = np.zeros_like(q)
    policy[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return policy


def epsilon_greedy_policy(q: np.ndarray, epsilon: float) -> np.ndarray:
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must lie in [0, 1]")
    n_actions = q.shape[1]
    policy = np.full_like(q, epsilon / n_actions, dtype=float)
    policy[np.arange(q.shape[0]), np.argmax(q, axis=1)] += 1.0 - epsilon
    return policy


@dataclass
class AbstractStageMdp:
    """Chain of decision stages whose reward splits into stage bias plus action term.

    ``true_reward == r_stage[:, None] + r_sa`` on non-terminal rows; the
    decomposition is rescaled alongside the rewards by :func:`normalize_rewards`
    so the invariant survives normalization.
    """

    mdp: TabularMdp
    r_stage: np.ndarray
    r_sa: np.ndarray
    r_bias: float
    normalized: bool = False

    def __post_init__(self) -> None:
        self.r_stage = np.asarray(self.r_stage, dtype=float)
        self.r_sa = np.asarray(self.r_sa, dtype=float)
        live = ~self.mdp.terminal
        recomposed = self.r_stage[live, None] + self.r_sa[live]
        if not np.allclose(recomposed, self.mdp.true_reward[live], atol=1e-9):
            raise ValueError("stage/action decomposition does not match true_reward")

    @property
    def n_stages(self) -> int:
        return self.mdp.n_states

    @property
    def nonterminal(self) -> np.ndarray:
        return ~self.mdp.terminal


def build_abstract_mdp(
    n_stages: int,
    n_actions: int,
    r_bias: float,
    rng: np.random.Generator,
    gamma: float = 0.99,
) -> AbstractStageMdp:
    """Deterministic stage chain with uniform random rewards.

    The last state is a zero-reward absorbing terminal. Per-action rewards are
    drawn Uniform[0, 10] and the per-stage bias Uniform[0, r_bias]; the action
    draw happens first so runs with equal seeds share r_sa across r_bias values.
    """
    if n_stages < 2:
        raise ValueError("need at least one decision stage plus the terminal")
    if n_actions < 1:
        raise ValueError("n_actions must be positive")
    if r_bias < 0:
        raise ValueError("r_bias must be nonnegative")
    s = n_stages
    r_sa = np.zeros((s, n_actions))
    r_sa[: s - 1] = rng.uniform(0.0, 10.0, size=(s - 1, n_actions))
    r_stage = np.zeros(s)
    r_stage[: s - 1] = r_bias * rng.uniform(0.0, 1.0, size=s - 1)

    transition = np.zeros((s, n_actions, s))
    transition[np.arange(s - 1), :, np.arange(1, s)] = 1.0
    transition[s - 1, :, s - 1] = 1.0
    initial = np.zeros(s)
    initial[0] = 1.0
    terminal = np.zeros(s, dtype=bool)
    terminal[s - 1] = True

    mdp = TabularMdp(
        transition=transition,
        true_reward=r_stage[:, None] + r_sa,
        initial_dist=initial,
        gamma=gamma,
        terminal=terminal,
    )
    return AbstractStageMdp(mdp=mdp, r_stage=r_stage, r_sa=r_sa, r_bias=float(r_bias))


def normalize_rewards(staged: AbstractStageMdp) -> AbstractStageMdp:
    """Affinely rescale rewards so the greedy-per-stage return spans [0, #stages].

    The offset is the mean over non-terminal stages of the per-stage minimum
    action reward, the scale the matching mean of maxima. After the rescale the
    best per-stage-greedy return equals the non-terminal stage count exactly
    and the worst equals zero.
    """
    live = staged.nonterminal
    r = staged.mdp.true_reward[live]
    m_min = float(r.min(axis=1).mean())
    m_max = float(r.max(axis=1).mean())
    span = m_max - m_min
    if span <= 1e-12:
        raise DegenerateScaleError(
            f"reward scale collapsed (m_min == m_max == {m_min:.6g})"
        )
    r_stage = staged.r_stage / span
    r_sa = (staged.r_sa - m_min) / span
    r_stage[~live] = 0.0
    r_sa[~live] = 0.0
    reward = r_stage[:, None] + r_sa
    reward[~live] = 0.0
    mdp = replace(staged.mdp, true_reward=reward)
    return AbstractStageMdp(
        mdp=mdp, r_stage=r_stage, r_sa=r_sa, r_bias=staged.r_bias, normalized=True
    )
