"""Gradient machinery shared by the learned models.

Kept in-package on purpose: every learner here is small enough that explicit
numpy forward/backward passes are simpler to audit than an autodiff
dependency, and the update rules stay bit-reproducible under a fixed seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Adam:
    """Adaptive-moment estimation over a list of parameter arrays.

    ``step`` applies a *descent* step in place; callers maximizing an
    objective pass the negated gradient.
    """

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


class Sgd:
    """Plain gradient descent; used by monotonicity sanity tests."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3):
        self.lr = float(lr)

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else float(lr)
        for p, g in zip(params, grads):
            p -= lr * g


def make_optimizer(kind: str, params: list[np.ndarray], lr: float):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return Sgd(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def softplus(z: np.ndarray) -> np.ndarray:
    # stable: log1p(exp(-|z|)) + max(z, 0)
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class Mlp:
    """Dense ReLU network with explicit forward/backward.

    ``head`` selects the output map: "linear" yields raw scores, "softplus"
    constrains outputs to be nonnegative. Outputs are scalar per row.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "linear"
    _cache: list = field(default_factory=list, repr=False)

    @classmethod
    def create(cls, in_dim: int, hidden: tuple[int, ...], rng: np.random.Generator,
               head: str = "linear", init_scale: float = 1.0) -> "Mlp":
        sizes = (in_dim, *hidden, 1)
        weights, biases = [], []
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, init_scale * np.sqrt(2.0 / a), size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights=weights, biases=biases, head=head)

    @property
    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        self._cache = acts
        z = acts[-1][:, 0]
        if self.head == "softplus":
            return softplus(z)
        return z

    def backward(self, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients for the last forward batch, ordered like ``params``."""
        acts = self._cache
        z = acts[-1][:, 0]
        if self.head == "softplus":
            dz = dout * sigmoid(z)
        else:
            dz = np.asarray(dout, dtype=float)
        delta = dz[:, None]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        for i in range(len(self.weights) - 1, -1, -1):
            grads_w[i] = acts[i].T @ delta
            grads_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0)
        return [*grads_w, *grads_b]

    def to_json_dict(self) -> dict:
        return {
            "head": self.head,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "shapes": [list(w.shape) for w in self.weights],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Mlp":
        weights = [
            np.asarray(flat, dtype=float).reshape(shape)
            for flat, shape in zip(d["weights"], d["shapes"])
        ]
        biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        return cls(weights=weights, biases=biases, head=str(d["head"]))


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def set_params(params: list[np.ndarray], flat: np.ndarray) -> None:
    i = 0
    for p in params:
        p[...] = flat[i : i + p.size].reshape(p.shape)
        i += p.size
