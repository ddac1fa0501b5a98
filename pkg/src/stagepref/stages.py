"""Stage membership maps, monotone trajectory segmentation, and bound audits.

A stage map scores how much each state belongs to each of N ordered stages.
Segmenting a trajectory means choosing a non-decreasing stage label per step
(starting in stage 0, moving forward at most one stage per step) that
maximizes the mean membership of the visited states; the achieved mean is
the trajectory's alignment objective, and its average over a set of
trajectories is the multi-stage measure of the map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Trajectory

_NEG = -np.inf


@dataclass
class StageMap:
    """Membership table, shape (n_states, n_stages); rows sum to 1."""

    membership: np.ndarray

    def __post_init__(self) -> None:
        self.membership = np.asarray(self.membership, dtype=float)
        if self.membership.ndim != 2:
            raise ValueError("membership must be 2-d")
        if np.any(self.membership < -1e-12):
            raise ValueError("membership values must be nonnegative")
        rows = self.membership.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > 1e-9:
            raise ValueError("membership rows must sum to 1")

    @property
    def n_stages(self) -> int:
        return self.membership.shape[1]

    @property
    def n_states(self) -> int:
        return self.membership.shape[0]


@dataclass
class StageAssignment:
    """Per-step stage labels (0-based) plus the mean membership they achieve."""

    labels: np.ndarray
    objective: float


def assign_stages(membership: np.ndarray, states: np.ndarray) -> StageAssignment:
    """Best monotone stage labeling of a state sequence, by dynamic program.

    The first step is pinned to stage 0 and labels may increase by at most
    one per step; the final label is free. Ties prefer staying in the
    current stage. Runs in O(T * n_stages).
    """
    states = np.asarray(states, dtype=int)
    t_len = len(states)
    if t_len == 0:
        raise ValueError("cannot segment an empty trajectory")
    n_stages = membership.shape[1]
    score = membership[states]  # (T, N)

    best = np.full((t_len, n_stages), _NEG)
    came_from_prev = np.zeros((t_len, n_stages), dtype=bool)
    best[0, 0] = score[0, 0]
    for t in range(1, t_len):
        stay = best[t - 1]
        step = np.full(n_stages, _NEG)
        step[1:] = best[t - 1, :-1]
        # ties prefer the stay branch, keeping labels as low as possible
        take_step = step > stay
        came_from_prev[t] = take_step
        best[t] = np.where(take_step, step, stay) + score[t]

    labels = np.empty(t_len, dtype=int)
    g = int(np.argmax(best[t_len - 1]))
    labels[t_len - 1] = g
    for t in range(t_len - 1, 0, -1):
        if came_from_prev[t, g]:
            g -= 1
        labels[t - 1] = g
    total = float(best[t_len - 1].max())
    return StageAssignment(labels=labels, objective=total / t_len)


def segment_trajectory(stage_map: StageMap, traj: Trajectory) -> StageAssignment:
    if int(traj.states.max()) >= stage_map.n_states:
        raise ValueError("trajectory visits states outside the stage map")
    return assign_stages(stage_map.membership, traj.states)


def multistage_measure(stage_map: StageMap, trajs: list[Trajectory]) -> float:
    """Mean segmentation objective over a trajectory set."""
    if len(trajs) == 0:
        raise ValueError("need at least one trajectory")
    return float(np.mean([segment_trajectory(stage_map, t).objective for t in trajs]))


def brute_force_assignment(membership: np.ndarray, states: np.ndarray) -> float:
    """Enumerate every monotone labeling; reference oracle for the DP."""
    states = np.asarray(states, dtype=int)
    t_len = len(states)
    n_stages = membership.shape[1]
    score = membership[states]
    best = _NEG

    def rec(t: int, g: int, acc: float) -> None:
        nonlocal best
        acc += score[t, g]
        if t == t_len - 1:
            best = max(best, acc)
            return
        rec(t + 1, g, acc)
        if g + 1 < n_stages:
            rec(t + 1, g + 1, acc)

    rec(0, 0, 0.0)
    return best / t_len


# ---------------------------------------------------------------------------
# timestep classifier and the aggregated stage map


@dataclass
class TimestepClassifier:
    """Empirical conditional distribution over the step index given the state.

    Built from fixed-length trajectories: ``cond[s, t]`` estimates the
    probability that a visit to state s happened at step t. States never
    seen in training fall back to a uniform row and are flagged on predict.
    """

    cond: np.ndarray
    visits: np.ndarray
    horizon: int

    def predict(self, state: int) -> tuple[int, bool]:
        """Most likely step for the state (earliest argmax) and an unseen flag."""
        row = self.cond[state]
        return int(np.argmax(row)), bool(self.visits[state] == 0)

    def max_prob(self) -> np.ndarray:
        return self.cond.max(axis=1)


def fit_timestep_classifier(trajs: list[Trajectory], n_states: int) -> TimestepClassifier:
    """Count-based fit; every trajectory must share one length."""
    if len(trajs) == 0:
        raise ValueError("need at least one trajectory")
    horizon = len(trajs[0])
    if horizon == 0 or any(len(t) != horizon for t in trajs):
        raise ValueError("timestep classifier needs equal nonzero trajectory lengths")
    counts = np.zeros((n_states, horizon))
    for traj in trajs:
        np.add.at(counts, (traj.states, np.arange(horizon)), 1.0)
    visits = counts.sum(axis=1)
    cond = np.full((n_states, horizon), 1.0 / horizon)
    seen = visits > 0
    cond[seen] = counts[seen] / visits[seen, None]
    return TimestepClassifier(cond=cond, visits=visits, horizon=horizon)


def classifier_accuracy(clf: TimestepClassifier, trajs: list[Trajectory]) -> float:
    """Fraction of (state, step) samples whose step is recovered exactly."""
    hits = 0
    total = 0
    for traj in trajs:
        if len(traj) != clf.horizon:
            raise ValueError("trajectory length differs from the classifier horizon")
        pred = np.argmax(clf.cond[traj.states], axis=1)
        hits += int(np.sum(pred == np.arange(clf.horizon)))
        total += clf.horizon
    return hits / total


def expected_max_prob(clf: TimestepClassifier, trajs: list[Trajectory]) -> float:
    """E[max_t p(t | s)] under the empirical state marginal of ``trajs``.

    On the training set this equals classifier accuracy exactly, which the
    bound audit exploits as a calibration identity.
    """
    num = 0.0
    total = 0
    mx = clf.max_prob()
    for traj in trajs:
        num += float(mx[traj.states].sum())
        total += len(traj)
    return num / total


def aggregate_stage_map(clf: TimestepClassifier, n_stages: int) -> StageMap:
    """Pool step probabilities into n_stages equal blocks of the horizon.

    Step t (0-based) lands in block ceil((t + 1) * n_stages / horizon) - 1,
    so the blocks partition the horizon and each row still sums to 1.
    """
    if not (1 <= n_stages <= clf.horizon):
        raise ValueError("need 1 <= n_stages <= horizon")
    t_idx = np.arange(clf.horizon)
    block = -(-(t_idx + 1) * n_stages // clf.horizon) - 1
    member = np.zeros((clf.cond.shape[0], n_stages))
    for b in range(n_stages):
        member[:, b] = clf.cond[:, block == b].sum(axis=1)
    return StageMap(membership=member)


@dataclass
class BoundReport:
    accuracy: float
    expected_max: float
    measure: float
    bound: float
    holds: bool

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "expected_max": self.expected_max,
            "measure": self.measure,
            "bound": self.bound,
            "holds": self.holds,
        }


def stage_bound_report(trajs: list[Trajectory], n_states: int, n_stages: int,
                       slack: float = 0.01) -> BoundReport:
    """Fit the classifier, build the pooled stage map, and audit measure >= acc^2."""
    clf = fit_timestep_classifier(trajs, n_states)
    stage_map = aggregate_stage_map(clf, n_stages)
    acc = classifier_accuracy(clf, trajs)
    measure = multistage_measure(stage_map, trajs)
    bound = acc * acc
    return BoundReport(
        accuracy=acc,
        expected_max=expected_max_prob(clf, trajs),
        measure=measure,
        bound=bound,
        holds=bool(measure >= bound - slack),
    )
