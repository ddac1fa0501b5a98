"""Pairwise preference probabilities, reward models, ensembles, and teachers.

A preference over two segments is modeled as a softmax over their summed
predicted rewards; training minimizes the cross-entropy between that
probability and the recorded label. Labels come from scripted teachers (an
exact comparator plus noisy, myopic, and mixed variants) or from a human via
the labeling service, in which case the label is initially absent.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mdp import Segment, Trajectory, segment_arrays
from .optim import Mlp, make_optimizer, sigmoid, softplus


@dataclass
class LabeledPair:
    """A resolved training example: step arrays for both segments plus the label."""

    states0: np.ndarray
    actions0: np.ndarray
    states1: np.ndarray
    actions1: np.ndarray
    label: int


def bt_log_probs(sum0: np.ndarray, sum1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities (first wins, second wins) from summed segment rewards."""
    z = np.asarray(sum1 - sum0, dtype=float)
    return -softplus(z), -softplus(-z)


def preference_probability(model, pair: LabeledPair) -> float:
    """Probability the *second* segment is preferred under ``model``."""
    s0 = float(model.predict(pair.states0, pair.actions0).sum())
    s1 = float(model.predict(pair.states1, pair.actions1).sum())
    return float(sigmoid(np.asarray(s1 - s0)))


class TabularRewardModel:
    """Reward table indexed by (state, action).

    ``weight_decay`` adds an L2 penalty on the table. Pairwise cross-entropy
    alone is scale-free, so without it the entries inflate without bound as
    the loss is driven to zero; the penalty pins the scale.
    """

    kind = "tabular"

    def __init__(self, n_states: int, n_actions: int, lr: float = 0.05,
                 optimizer: str = "adam", init_scale: float = 0.0,
                 rng: np.random.Generator | None = None,
                 weight_decay: float = 0.0):
        self.n_states, self.n_actions = int(n_states), int(n_actions)
        if weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")
        self.weight_decay = float(weight_decay)
        if init_scale > 0.0:
            if rng is None:
                raise ValueError("init_scale > 0 requires an rng")
            self.psi = rng.normal(0.0, init_scale, size=(n_states, n_actions))
        else:
            self.psi = np.zeros((n_states, n_actions))
        self.opt = make_optimizer(optimizer, [self.psi], lr)

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.psi[states, actions]

    def table(self) -> np.ndarray:
        return self.psi.copy()

    def loss_and_grad(self, pairs: Sequence[LabeledPair]) -> tuple[float, list[np.ndarray]]:
        loss, d_sums = _pairwise_loss(self, pairs)
        grad = np.zeros_like(self.psi)
        for pair, (d0, d1) in zip(pairs, d_sums):
            np.add.at(grad, (pair.states0, pair.actions0), d0)
            np.add.at(grad, (pair.states1, pair.actions1), d1)
        if self.weight_decay:
            loss += 0.5 * self.weight_decay * float(np.sum(self.psi * self.psi))
            grad += self.weight_decay * self.psi
        return loss, [grad]

    def training_step(self, pairs: Sequence[LabeledPair], lr: float | None = None) -> float:
        loss, grads = self.loss_and_grad(pairs)
        self.opt.step([self.psi], grads, lr=lr)
        return loss

    @property
    def params(self) -> list[np.ndarray]:
        return [self.psi]

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "psi": self.psi.ravel().tolist(),
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_json_dict(cls, d: dict, lr: float = 0.05) -> "TabularRewardModel":
        model = cls(int(d["n_states"]), int(d["n_actions"]), lr=lr,
                    weight_decay=float(d.get("weight_decay", 0.0)))
        model.psi = np.asarray(d["psi"], dtype=float).reshape(model.n_states, model.n_actions)
        model.opt = make_optimizer("adam", [model.psi], lr)
        return model


class NetworkRewardModel:
    """Dense network over concatenated state features and one-hot actions."""

    kind = "network"

    def __init__(self, features: np.ndarray, n_actions: int,
                 hidden: tuple[int, ...] = (64, 64), lr: float = 1e-3,
                 optimizer: str = "adam", rng: np.random.Generator | None = None,
                 init_scale: float = 0.3):
        rng = np.random.default_rng(0) if rng is None else rng
        self.features = np.asarray(features, dtype=float)
        self.n_states = self.features.shape[0]
        self.n_actions = int(n_actions)
        self.net = Mlp.create(self.features.shape[1] + n_actions, hidden, rng,
                              head="linear", init_scale=init_scale)
        self.opt = make_optimizer(optimizer, self.net.params, lr)

    def _inputs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        onehot = np.zeros((len(actions), self.n_actions))
        onehot[np.arange(len(actions)), actions] = 1.0
        return np.concatenate([self.features[states], onehot], axis=1)

    def predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.net.forward(self._inputs(states, actions))

    def table(self) -> np.ndarray:
        out = np.empty((self.n_states, self.n_actions))
        states = np.arange(self.n_states)
        for a in range(self.n_actions):
            out[:, a] = self.predict(states, np.full(self.n_states, a))
        return out

    def loss_and_grad(self, pairs: Sequence[LabeledPair]) -> tuple[float, list[np.ndarray]]:
        loss, d_sums = _pairwise_loss(self, pairs)
        # one concatenated backward pass: each step's reward gradient equals
        # the gradient of its segment's summed reward
        states = np.concatenate([np.concatenate([p.states0, p.states1]) for p in pairs])
        actions = np.concatenate([np.concatenate([p.actions0, p.actions1]) for p in pairs])
        douts = np.concatenate([
            np.concatenate([np.full(len(p.states0), d0), np.full(len(p.states1), d1)])
            for p, (d0, d1) in zip(pairs, d_sums)
        ])
        self.net.forward(self._inputs(states, actions))
        return loss, self.net.backward(douts)

    def training_step(self, pairs: Sequence[LabeledPair], lr: float | None = None) -> float:
        loss, grads = self.loss_and_grad(pairs)
        self.opt.step(self.net.params, grads, lr=lr)
        return loss

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": self.features.ravel().tolist(),
            "feature_dim": int(self.features.shape[1]),
            "n_actions": self.n_actions,
            "net": self.net.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict, lr: float = 1e-3) -> "NetworkRewardModel":
        features = np.asarray(d["features"], dtype=float).reshape(-1, int(d["feature_dim"]))
        model = cls(features, int(d["n_actions"]), lr=lr)
        model.net = Mlp.from_json_dict(d["net"])
        model.opt = make_optimizer("adam", model.net.params, lr)
        return model


def _pairwise_loss(model, pairs: Sequence[LabeledPair]):
    """Mean cross-entropy and per-pair gradients wrt the two segment sums."""
    if len(pairs) == 0:
        raise ValueError("empty training batch")
    n = len(pairs)
    loss = 0.0
    d_sums = []
    for pair in pairs:
        if pair.label not in (0, 1):
            raise ValueError(f"trainable labels are 0 or 1, got {pair.label!r}")
        s0 = float(model.predict(pair.states0, pair.actions0).sum())
        s1 = float(model.predict(pair.states1, pair.actions1).sum())
        z = s1 - s0 if pair.label == 1 else s0 - s1
        # -log sigmoid(z) == softplus(-z), computed with scalar math for speed
        loss += (math.log1p(math.exp(-abs(z))) + max(-z, 0.0)) / n
        # d loss / d s1 = (P[second wins] - label) / n, antisymmetric in the sums
        p1 = 1.0 / (1.0 + math.exp(s0 - s1)) if s1 >= s0 else 1.0 - 1.0 / (1.0 + math.exp(s1 - s0))
        err = (p1 - pair.label) / n
        d_sums.append((-err, err))
    return loss, d_sums


def reward_loss_and_grad(model, pairs: Sequence[LabeledPair]) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy loss and parameter gradients for one ensemble member."""
    return model.loss_and_grad(pairs)


@dataclass
class RewardEnsemble:
    members: list

    def __post_init__(self) -> None:
        if len(self.members) == 0:
            raise ValueError("ensemble needs at least one member")

    def mean_table(self) -> np.ndarray:
        return np.mean([m.table() for m in self.members], axis=0)

    def mean_predict(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.mean([m.predict(states, actions) for m in self.members], axis=0)

    def disagreement(self, pair: LabeledPair) -> float:
        """Population variance of the member probabilities that segment 1 wins."""
        probs = [preference_probability(m, pair) for m in self.members]
        return float(np.var(probs))

    def train(self, pairs: Sequence[LabeledPair], steps: int, lr: float | None = None,
              bags: Sequence[Sequence[int]] | None = None) -> float:
        """Fit every member for ``steps`` gradient steps; returns the last loss.

        ``bags`` optionally gives each member its own multiset of pair indices
        (a bootstrap resample).  Members fitting different resamples disagree
        wherever the data only weakly pins a value, so the ensemble spread
        becomes an honest uncertainty signal instead of pure init noise.  A
        member whose bag is empty falls back to the full pair list.
        """
        if bags is not None:
            if len(bags) != len(self.members):
                raise ValueError("need exactly one index bag per member")
            for bag in bags:
                if any(i < 0 or i >= len(pairs) for i in bag):
                    raise ValueError("bag indices must point into pairs")
        stacked = None
        if all(isinstance(m, TabularRewardModel) for m in self.members):
            stacked = _stack_pairs(pairs)
        last = 0.0
        if stacked is not None:
            views = []
            for k in range(len(self.members)):
                if bags is None or len(bags[k]) == 0:
                    views.append(stacked)
                else:
                    idx = np.asarray(bags[k], dtype=int)
                    s0, a0, s1, a1, labels = stacked
                    views.append((s0[idx], a0[idx], s1[idx], a1[idx], labels[idx]))
            for _ in range(steps):
                last = float(np.mean([
                    _stacked_tabular_step(m, view, lr)
                    for m, view in zip(self.members, views)
                ]))
            return last
        member_pairs = []
        for k in range(len(self.members)):
            if bags is None or len(bags[k]) == 0:
                member_pairs.append(list(pairs))
            else:
                member_pairs.append([pairs[int(i)] for i in bags[k]])
        for _ in range(steps):
            last = float(np.mean([
                m.training_step(mp, lr=lr)
                for m, mp in zip(self.members, member_pairs)
            ]))
        return last


def _stack_pairs(pairs: Sequence[LabeledPair]):
    """(s0, a0, s1, a1, labels) as 2-d arrays, or None for ragged lengths."""
    try:
        s0 = np.stack([p.states0 for p in pairs])
        a0 = np.stack([p.actions0 for p in pairs])
        s1 = np.stack([p.states1 for p in pairs])
        a1 = np.stack([p.actions1 for p in pairs])
    except ValueError:
        return None
    labels = np.array([p.label for p in pairs], dtype=float)
    if np.any((labels != 0.0) & (labels != 1.0)):
        raise ValueError("trainable labels are 0 or 1")
    return s0, a0, s1, a1, labels


def _stacked_tabular_step(model: "TabularRewardModel", stacked, lr: float | None) -> float:
    """Vectorized equivalent of ``training_step`` for equal-length segments."""
    s0, a0, s1, a1, labels = stacked
    n = len(labels)
    sum0 = model.psi[s0, a0].sum(axis=1)
    sum1 = model.psi[s1, a1].sum(axis=1)
    z = sum1 - sum0
    loss = float(np.mean(softplus(-z) * labels + softplus(z) * (1.0 - labels)))
    err = (sigmoid(z) - labels) / n
    grad = np.zeros_like(model.psi)
    h0, h1 = s0.shape[1], s1.shape[1]
    np.add.at(grad, (s0.ravel(), a0.ravel()), np.repeat(-err, h0))
    np.add.at(grad, (s1.ravel(), a1.ravel()), np.repeat(err, h1))
    if model.weight_decay:
        loss += 0.5 * model.weight_decay * float(np.sum(model.psi * model.psi))
        grad += model.weight_decay * model.psi
    model.opt.step([model.psi], [grad], lr=lr)
    return loss


def make_tabular_ensemble(n_states: int, n_actions: int, n_members: int,
                          rng: np.random.Generator, lr: float = 0.05,
                          init_scale: float = 0.5,
                          weight_decay: float = 0.0) -> RewardEnsemble:
    members = [
        TabularRewardModel(n_states, n_actions, lr=lr, init_scale=init_scale,
                           rng=rng, weight_decay=weight_decay)
        for _ in range(n_members)
    ]
    return RewardEnsemble(members=members)


# ---------------------------------------------------------------------------
# preference records and the JSONL-backed buffer


@dataclass
class PreferenceRecord:
    """One stored query: two segments, a label, and provenance."""

    sigma0: Segment
    sigma1: Segment
    label: int | str | None
    teacher: str
    created_at: float
    selector: str = ""
    query_id: str = ""

    def to_json_dict(self) -> dict:
        return {
            "sigma0": segment_to_dict(self.sigma0),
            "sigma1": segment_to_dict(self.sigma1),
            "label": self.label,
            "teacher": self.teacher,
            "created_at": self.created_at,
            "selector": self.selector,
            "query_id": self.query_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PreferenceRecord":
        return cls(
            sigma0=segment_from_dict(d["sigma0"]),
            sigma1=segment_from_dict(d["sigma1"]),
            label=d["label"],
            teacher=str(d["teacher"]),
            created_at=float(d["created_at"]),
            selector=str(d.get("selector", "")),
            query_id=str(d.get("query_id", "")),
        )

    def trainable(self) -> bool:
        return self.label in (0, 1)

    def resolve(self, trajectories: Sequence[Trajectory]) -> LabeledPair:
        if not self.trainable():
            raise ValueError("only records labeled 0 or 1 can be resolved for training")
        s0, a0 = segment_arrays(trajectories[self.sigma0.source], self.sigma0)
        s1, a1 = segment_arrays(trajectories[self.sigma1.source], self.sigma1)
        return LabeledPair(states0=s0, actions0=a0, states1=s1, actions1=a1,
                           label=int(self.label))


def segment_to_dict(seg: Segment) -> dict:
    return {
        "source": seg.source,
        "start": seg.start,
        "length": seg.length,
        "first_state": seg.first_state,
        "last_state": seg.last_state,
    }


def segment_from_dict(d: dict) -> Segment:
    return Segment(
        source=int(d["source"]),
        start=int(d["start"]),
        length=int(d["length"]),
        first_state=int(d["first_state"]),
        last_state=int(d["last_state"]),
    )


class PreferenceLog:
    """Append-only preference buffer, optionally mirrored to a JSONL file.

    Every append is flushed (and fsynced) before returning so a crash after
    an acknowledged label cannot lose it.
    """

    def __init__(self, path: str | None = None):
        self.path = path
        self.records: list[PreferenceRecord] = []
        self._fh = None
        if path is not None:
            if os.path.exists(path):
                with open(path, "r", encoding="utf-8") as fh:
                    for line in fh:
                        line = line.strip()
                        if line:
                            self.records.append(PreferenceRecord.from_json_dict(json.loads(line)))
            self._fh = open(path, "a", encoding="utf-8")

    def append(self, record: PreferenceRecord) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record.to_json_dict(), sort_keys=True) + "\n")
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def trainable_records(self) -> list[PreferenceRecord]:
        return [r for r in self.records if r.trainable()]

    def __len__(self) -> int:
        return len(self.records)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# scripted teachers


@dataclass(frozen=True)
class Teacher:
    """Preference oracle configuration.

    kinds: "oracle" compares true summed rewards; "error" flips the oracle
    answer with probability ``epsilon``; "myopic" discounts early steps so
    later ones dominate; "inconsistent" mixes a myopic(0.9) and an
    error(0.2) teacher per query; "human" defers to the labeling service.
    """

    kind: str = "oracle"
    epsilon: float = 0.1
    discount: float = 0.9

    def __post_init__(self) -> None:
        if self.kind not in ("oracle", "error", "myopic", "inconsistent", "human"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon must lie in [0, 1]")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")


def _compare(v0: float, v1: float, rng: np.random.Generator) -> int:
    if v0 == v1:
        return int(rng.integers(2))
    return int(v1 > v0)


def _myopic_value(rewards: np.ndarray, discount: float) -> float:
    h = len(rewards)
    weights = discount ** (h - 1 - np.arange(h))
    return float(np.dot(weights, rewards))


def label_pair(
    teacher: Teacher,
    rewards0: np.ndarray,
    rewards1: np.ndarray,
    rng: np.random.Generator,
) -> int | None:
    """Label from per-step *true* rewards; None means the query awaits a human."""
    rewards0 = np.asarray(rewards0, dtype=float)
    rewards1 = np.asarray(rewards1, dtype=float)
    if teacher.kind == "human":
        return None
    if teacher.kind == "oracle":
        return _compare(rewards0.sum(), rewards1.sum(), rng)
    if teacher.kind == "error":
        y = _compare(rewards0.sum(), rewards1.sum(), rng)
        return 1 - y if rng.random() < teacher.epsilon else y
    if teacher.kind == "myopic":
        return _compare(
            _myopic_value(rewards0, teacher.discount),
            _myopic_value(rewards1, teacher.discount),
            rng,
        )
    # inconsistent: a fresh coin decides which sub-teacher answers this query
    if rng.random() < 0.5:
        return label_pair(Teacher(kind="myopic", discount=0.9), rewards0, rewards1, rng)
    return label_pair(Teacher(kind="error", epsilon=0.2), rewards0, rewards1, rng)


def timestamp() -> float:
    return time.time()
