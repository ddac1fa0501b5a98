"""Discounted state occupancy, successor distances, and contrastive learning.

The exact path computes the discounted occupancy of a fixed policy in closed
form and turns it into a quasimetric via log-ratios against the diagonal.
The learned path fits an energy ``f(x, y) = c(y) - d(x, y)`` with a
symmetrized noise-contrastive objective over future-state pairs, so ``d``
approaches the same quasimetric without requiring the transition matrix.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .mdp import TabularMdp, Trajectory
from .optim import Mlp, make_optimizer

_RESIDUAL_TOL = 1e-9


@dataclass
class OccupancyMatrix:
    """Row x holds the discounted visitation distribution started from x."""

    values: np.ndarray
    gamma: float


def exact_occupancy(mdp: TabularMdp, policy: np.ndarray, gamma: float | None = None) -> OccupancyMatrix:
    """Closed-form discounted occupancy (1 - g) * (I - g * P_pi)^-1.

    Raises :class:`NumericalError` if the solve's residual exceeds 1e-9.
    """
    gamma = mdp.gamma if gamma is None else float(gamma)
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1)")
    policy = np.asarray(policy, dtype=float)
    p_pi = np.einsum("sa,sab->sb", policy, mdp.transition)
    n = mdp.n_states
    a = np.eye(n) - gamma * p_pi
    occ = (1.0 - gamma) * np.linalg.solve(a, np.eye(n))
    residual = np.max(np.abs(a @ occ - (1.0 - gamma) * np.eye(n)))
    if residual > _RESIDUAL_TOL:
        raise NumericalError(f"occupancy solve residual {residual:.3e} above tolerance")
    return OccupancyMatrix(values=occ, gamma=gamma)


@dataclass
class SuccessorDistance:
    """Quasimetric over states; +inf marks unreachable pairs."""

    values: np.ndarray
    gamma: float
    source: str = "exact"

    def to_csv(self, path: str) -> None:
        n = self.values.shape[0]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["state"] + [str(j) for j in range(n)])
            for i in range(n):
                writer.writerow([str(i)] + [repr(float(v)) for v in self.values[i]])

    @classmethod
    def from_csv(cls, path: str, gamma: float, source: str = "exact") -> "SuccessorDistance":
        with open(path, "r", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        values = np.array([[float(v) for v in row[1:]] for row in body])
        return cls(values=values, gamma=gamma, source=source)


def successor_distance_from_occupancy(occ: OccupancyMatrix) -> SuccessorDistance:
    """d(x, y) = ln occ[y, y] - ln occ[x, y]; zero diagonal, +inf where unreachable."""
    m = occ.values
    diag = np.diag(m)
    if np.any(diag <= 0):
        raise NumericalError("occupancy diagonal must be positive")
    with np.errstate(divide="ignore"):
        d = np.log(diag)[None, :] - np.log(np.maximum(m, 0.0))
    np.fill_diagonal(d, 0.0)
    return SuccessorDistance(values=d, gamma=occ.gamma, source="exact")


def sample_positive_pair(
    traj: Trajectory, gamma: float, rng: np.random.Generator
) -> tuple[int, int, bool]:
    """Draw (x, y) with y a geometrically discounted future state of x.

    The offset k is distributed (1 - gamma) * gamma^k over k >= 0; draws past
    the end of the trajectory clamp to the last step and set the truncation
    flag.
    """
    if len(traj) == 0:
        raise ValueError("cannot sample from an empty trajectory")
    if not (0.0 <= gamma < 1.0):
        raise ValueError("gamma must lie in [0, 1)")
    i = int(rng.integers(len(traj)))
    k = int(rng.geometric(1.0 - gamma)) - 1
    j = i + k
    truncated = j > len(traj) - 1
    if truncated:
        j = len(traj) - 1
    return int(traj.states[i]), int(traj.states[j]), truncated


def sample_positive_batch(
    trajs: list[Trajectory], gamma: float, batch: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Batch of positive pairs; trajectories weighted by their step counts.

    Uses vectorized draws with the same per-pair distribution as
    :func:`sample_positive_pair` (uniform start step, geometric offset,
    clamped at the trajectory end).
    """
    lengths = np.array([len(t) for t in trajs], dtype=float)
    total = lengths.sum()
    if total == 0:
        raise ValueError("no steps to sample from")
    ti = rng.choice(len(trajs), size=batch, p=lengths / total)
    starts = np.floor(rng.random(batch) * lengths[ti]).astype(int)
    offs = rng.geometric(1.0 - gamma, size=batch) - 1 if gamma > 0.0 \
        else np.zeros(batch, dtype=int)
    ends = np.minimum(starts + offs, lengths[ti].astype(int) - 1)
    xs = np.empty(batch, dtype=int)
    ys = np.empty(batch, dtype=int)
    for b in range(batch):
        states = trajs[int(ti[b])].states
        xs[b] = states[starts[b]]
        ys[b] = states[ends[b]]
    return xs, ys


# ---------------------------------------------------------------------------
# energy models


class TabularEnergyModel:
    """Lookup-table energy f(x, y) = c[y] - d[x, y] with d projected to >= 0."""

    kind = "tabular"

    def __init__(self, n_states: int, lr: float = 0.01, optimizer: str = "adam",
                 init_scale: float = 0.0, rng: np.random.Generator | None = None):
        self.n_states = int(n_states)
        if init_scale > 0.0:
            if rng is None:
                raise ValueError("init_scale > 0 requires an rng")
            self.c = rng.normal(0.0, init_scale, size=n_states)
            self.d = np.abs(rng.normal(0.0, init_scale, size=(n_states, n_states)))
        else:
            self.c = np.zeros(n_states)
            self.d = np.zeros((self.n_states, self.n_states))
        self.opt = make_optimizer(optimizer, [self.c, self.d], lr)

    def score_matrix(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return self.c[ys][None, :] - self.d[np.ix_(xs, ys)]

    def distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return self.d[xs, ys]

    def full_distance(self) -> np.ndarray:
        return self.d.copy()

    def ascent_step(self, xs: np.ndarray, ys: np.ndarray, d_score: np.ndarray,
                    lr: float | None = None) -> None:
        grad_c = np.zeros_like(self.c)
        np.add.at(grad_c, ys, d_score.sum(axis=0))
        grad_d = np.zeros_like(self.d)
        xi = np.repeat(xs, len(ys))
        yi = np.tile(ys, len(xs))
        np.add.at(grad_d, (xi, yi), -d_score.ravel())
        # descent on the negated gradient == ascent; then project d onto >= 0
        self.opt.step([self.c, self.d], [-grad_c, -grad_d], lr=lr)
        np.maximum(self.d, 0.0, out=self.d)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_states": self.n_states,
            "c": self.c.tolist(),
            "d": self.d.ravel().tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict, lr: float = 0.01) -> "TabularEnergyModel":
        model = cls(int(d["n_states"]), lr=lr)
        model.c = np.asarray(d["c"], dtype=float)
        model.d = np.asarray(d["d"], dtype=float).reshape(model.n_states, model.n_states)
        model.opt = make_optimizer("adam", [model.c, model.d], lr)
        return model


class NetworkEnergyModel:
    """Distance head (softplus, hence >= 0) plus free anchor head over features."""

    kind = "network"

    def __init__(self, features: np.ndarray, hidden: tuple[int, ...] = (64, 64),
                 lr: float = 1e-3, optimizer: str = "adam",
                 rng: np.random.Generator | None = None, init_scale: float = 0.3):
        rng = np.random.default_rng(0) if rng is None else rng
        self.features = np.asarray(features, dtype=float)
        self.n_states, f_dim = self.features.shape
        self.d_net = Mlp.create(2 * f_dim, hidden, rng, head="softplus", init_scale=init_scale)
        self.c_net = Mlp.create(f_dim, hidden, rng, head="linear", init_scale=init_scale)
        self.opt = make_optimizer(optimizer, self.params, lr)

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.d_net.params, *self.c_net.params]

    def _pair_input(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        fx = self.features[np.repeat(xs, len(ys))]
        fy = self.features[np.tile(ys, len(xs))]
        return np.concatenate([fx, fy], axis=1)

    def score_matrix(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        d = self.d_net.forward(self._pair_input(xs, ys)).reshape(len(xs), len(ys))
        c = self.c_net.forward(self.features[ys])
        return c[None, :] - d

    def distance(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        pairs = np.concatenate([self.features[xs], self.features[ys]], axis=1)
        return self.d_net.forward(pairs)

    def full_distance(self) -> np.ndarray:
        all_states = np.arange(self.n_states)
        return self.d_net.forward(self._pair_input(all_states, all_states)).reshape(
            self.n_states, self.n_states
        )

    def ascent_step(self, xs: np.ndarray, ys: np.ndarray, d_score: np.ndarray,
                    lr: float | None = None) -> None:
        # recompute forward to refresh caches, then push the two heads separately
        self.d_net.forward(self._pair_input(xs, ys))
        grads_d = self.d_net.backward(-d_score.ravel())
        self.c_net.forward(self.features[ys])
        grads_c = self.c_net.backward(d_score.sum(axis=0))
        grads = [*grads_d, *grads_c]
        self.opt.step(self.params, [-g for g in grads], lr=lr)

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": self.features.ravel().tolist(),
            "feature_dim": int(self.features.shape[1]),
            "d_net": self.d_net.to_json_dict(),
            "c_net": self.c_net.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict, lr: float = 1e-3) -> "NetworkEnergyModel":
        f_dim = int(d["feature_dim"])
        features = np.asarray(d["features"], dtype=float).reshape(-1, f_dim)
        model = cls(features, lr=lr)
        model.d_net = Mlp.from_json_dict(d["d_net"])
        model.c_net = Mlp.from_json_dict(d["c_net"])
        model.opt = make_optimizer("adam", model.params, lr)
        return model


def save_checkpoint(model, path: str, meta: dict | None = None) -> None:
    payload = model.to_json_dict()
    payload["meta"] = dict(meta or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_checkpoint(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    if d["kind"] == "tabular":
        return TabularEnergyModel.from_json_dict(d)
    if d["kind"] == "network":
        return NetworkEnergyModel.from_json_dict(d)
    raise ValueError(f"unknown checkpoint kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# symmetrized InfoNCE


def infonce_objective(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and gradient (wrt the score matrix) of the symmetric objective.

    The objective sums, over the batch diagonal, the log row-softmax and the
    log column-softmax of the paired scores. It is maximized when each
    positive pair beats its in-batch negatives both ways. A batch of one is
    trivially 0; a constant score matrix gives 2 * B * ln(1 / B).
    """
    b = scores.shape[0]
    if scores.shape != (b, b):
        raise ValueError("scores must be square")
    row = scores - scores.max(axis=1, keepdims=True)
    row_lse = np.log(np.exp(row).sum(axis=1))
    col = scores - scores.max(axis=0, keepdims=True)
    col_lse = np.log(np.exp(col).sum(axis=0))
    diag = np.arange(b)
    value = float((row[diag, diag] - row_lse).sum() + (col[diag, diag] - col_lse).sum())
    p_row = np.exp(row - row_lse[:, None])
    p_col = np.exp(col - col_lse[None, :])
    grad = -(p_row + p_col)
    grad[diag, diag] += 2.0
    return value, grad


def infonce_step(model, xs: np.ndarray, ys: np.ndarray, lr: float | None = None) -> float:
    """One ascent step on a positive-pair batch; returns the pre-step objective."""
    xs = np.asarray(xs, dtype=int)
    ys = np.asarray(ys, dtype=int)
    if len(xs) != len(ys) or len(xs) == 0:
        raise ValueError("xs and ys must be equal-length and nonempty")
    value, grad = infonce_objective(model.score_matrix(xs, ys))
    model.ascent_step(xs, ys, grad, lr=lr)
    return value


def fit_successor_distance(
    model,
    trajs: list[Trajectory],
    gamma: float,
    steps: int,
    batch_size: int,
    rng: np.random.Generator,
    lr: float | None = None,
) -> np.ndarray:
    """Run ``steps`` InfoNCE updates on pairs sampled from the trajectories."""
    trace = np.empty(steps)
    for i in range(steps):
        xs, ys = sample_positive_batch(trajs, gamma, batch_size, rng)
        trace[i] = infonce_step(model, xs, ys, lr=lr)
    return trace


def learned_distance(model, gamma: float) -> SuccessorDistance:
    """Model's distance table in the zero-self-distance gauge.

    The contrastive score ``c[y] - d[x, y]`` identifies ``d`` only up to a
    per-destination offset: shifting column y of ``d`` and ``c[y]`` by the
    same amount leaves every score unchanged, so the raw table can carry
    nonzero self-distances. Temporal distance pins d(y, y) = 0; subtracting
    each column's diagonal entry applies that gauge, and the clamp removes
    the small negative residues estimation noise leaves behind.
    """
    values = model.full_distance()
    values = values - np.diag(values)[None, :]
    np.maximum(values, 0.0, out=values)
    return SuccessorDistance(values=values, gamma=gamma, source="learned")
