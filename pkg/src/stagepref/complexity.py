"""Query-complexity experiments on the staged chain MDP.

Two instruments live here. The first trains a tabular reward model from
preference queries that either pair unrelated state-action draws
("conventional") or pair two actions at a shared state ("stage_aligned"),
tracking how fast the greedy policy's true return rises. The second counts
binary-insertion-sort comparisons for ranking all state-action cells at once
versus ranking actions stage by stage, next to the matching entropy lower
bounds.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .mdp import AbstractStageMdp, build_abstract_mdp, make_rng, normalize_rewards
from .optim import Adam, sigmoid

QUERY_MODES = ("conventional", "stage_aligned")


@dataclass
class TabularExperimentConfig:
    n_stages: int = 101
    n_actions: int = 5
    r_bias: float = 100.0
    epochs: int = 100
    queries_per_epoch: int = 200
    lr: float = 0.05
    mode: str = "conventional"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in QUERY_MODES:
            raise ValueError(f"mode must be one of {QUERY_MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.queries_per_epoch < 1:
            raise ValueError("epochs and queries_per_epoch must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class CurvePoint:
    epoch: int
    normalized_return: float
    reward_error: float


def evaluate_greedy(r_hat: np.ndarray, staged: AbstractStageMdp) -> float:
    """True (normalized) return of acting greedily wrt r_hat at every stage.

    The chain visits each non-terminal stage exactly once, so the return is
    the sum over stages of the true reward of the predicted-best action;
    argmax ties resolve to the lowest action id.
    """
    live = staged.nonterminal
    choice = np.argmax(r_hat[live], axis=1)
    rows = staged.mdp.true_reward[live]
    return float(rows[np.arange(rows.shape[0]), choice].sum())


def reward_error(r_hat: np.ndarray, staged: AbstractStageMdp) -> float:
    """Mean absolute error between mean-centered tables, non-terminal rows only."""
    live = staged.nonterminal
    a = r_hat[live] - r_hat[live].mean()
    b = staged.mdp.true_reward[live] - staged.mdp.true_reward[live].mean()
    return float(np.mean(np.abs(a - b)))


def _sample_queries(cfg: TabularExperimentConfig, staged: AbstractStageMdp,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (s0, a0, s1, a1) for one epoch's query batch."""
    m = cfg.queries_per_epoch
    n_live = staged.n_stages - 1
    if cfg.mode == "conventional":
        s = rng.integers(0, n_live, size=2 * m)
        a = rng.integers(0, cfg.n_actions, size=2 * m)
        return s[:m], a[:m], s[m:], a[m:]
    s = rng.integers(0, n_live, size=m)
    a = rng.integers(0, cfg.n_actions, size=2 * m)
    return s, a[:m], s, a[m:]


def run_tabular_pbrl(cfg: TabularExperimentConfig) -> list[CurvePoint]:
    """One preference-learning run on a fresh staged chain; returns the curve.

    Per epoch: draw the mode's query batch, label each query by comparing
    normalized true rewards (ties break uniformly), take one Adam step on the
    preference cross-entropy, then evaluate the greedy policy.
    """
    rng = make_rng(cfg.seed)
    staged = normalize_rewards(
        build_abstract_mdp(cfg.n_stages, cfg.n_actions, cfg.r_bias, rng)
    )
    true_r = staged.mdp.true_reward
    psi = np.zeros_like(true_r)
    opt = Adam([psi], lr=cfg.lr)
    m = cfg.queries_per_epoch
    curve: list[CurvePoint] = []
    for epoch in range(1, cfg.epochs + 1):
        s0, a0, s1, a1 = _sample_queries(cfg, staged, rng)
        v0 = true_r[s0, a0]
        v1 = true_r[s1, a1]
        labels = np.where(v1 > v0, 1.0, 0.0)
        ties = v0 == v1
        if ties.any():
            labels[ties] = rng.integers(0, 2, size=int(ties.sum()))
        # mean cross-entropy gradient wrt the two predicted rewards
        p1 = sigmoid(psi[s1, a1] - psi[s0, a0])
        err = (p1 - labels) / m
        grad = np.zeros_like(psi)
        np.add.at(grad, (s1, a1), err)
        np.add.at(grad, (s0, a0), -err)
        opt.step([psi], [grad])
        curve.append(
            CurvePoint(
                epoch=epoch,
                normalized_return=evaluate_greedy(psi, staged),
                reward_error=reward_error(psi, staged),
            )
        )
    return curve


@dataclass
class SweepResult:
    rows: list[dict]

    def to_csv(self, path: str) -> None:
        cols = ["mode", "r_bias", "seed", "epoch", "normalized_return", "reward_error"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([
                    row["mode"], repr(float(row["r_bias"])), row["seed"], row["epoch"],
                    repr(float(row["normalized_return"])), repr(float(row["reward_error"])),
                ])


def run_experiment_sweep(modes: list[str], r_biases: list[float], seeds: list[int],
                         base: TabularExperimentConfig | None = None) -> SweepResult:
    """Cross product of modes, bias levels, and seeds, flattened per epoch."""
    base = base or TabularExperimentConfig()
    rows: list[dict] = []
    for r_bias in r_biases:
        for mode in modes:
            for seed in seeds:
                cfg = TabularExperimentConfig(
                    n_stages=base.n_stages, n_actions=base.n_actions, r_bias=r_bias,
                    epochs=base.epochs, queries_per_epoch=base.queries_per_epoch,
                    lr=base.lr, mode=mode, seed=seed,
                )
                for point in run_tabular_pbrl(cfg):
                    rows.append({
                        "mode": mode, "r_bias": r_bias, "seed": seed,
                        "epoch": point.epoch,
                        "normalized_return": point.normalized_return,
                        "reward_error": point.reward_error,
                    })
    return SweepResult(rows=rows)


# ---------------------------------------------------------------------------
# comparison counting


class _CountingKey:
    """Wraps a value so every '<' during sorting is tallied."""

    __slots__ = ("value", "counter")

    def __init__(self, value: float, counter: list[int]):
        self.value = value
        self.counter = counter

    def __lt__(self, other: "_CountingKey") -> bool:
        self.counter[0] += 1
        return self.value < other.value


def binary_insertion_sort(values: list[float]) -> tuple[list[float], int]:
    """Sort with binary insertion, returning (sorted values, comparison count).

    Each insertion into a sorted prefix of length k costs between
    floor(log2(k + 1)) and ceil(log2(k + 1)) comparisons depending on which
    search path the instance takes, which is what gives the count the
    information bound's shape. Instance counts can land a few comparisons
    under the entropy bound; only :func:`binary_insertion_worst_case` is
    guaranteed to dominate it.
    """
    counter = [0]
    keys: list[_CountingKey] = []
    for v in values:
        key = _CountingKey(float(v), counter)
        lo, hi = 0, len(keys)
        while lo < hi:
            mid = (lo + hi) // 2
            if key < keys[mid]:
                hi = mid
            else:
                lo = mid + 1
        keys.insert(lo, key)
    return [k.value for k in keys], counter[0]


def binary_insertion_worst_case(n: int) -> int:
    """Comparisons binary insertion must budget to sort any n items.

    Inserting into a sorted prefix of length k costs at most
    ceil(log2(k + 1)) comparisons, so the budget is the sum over k. The
    entropy bound log2(n!) provably lower-bounds this worst case (it
    lower-bounds every comparison sort's), whereas the count on one
    concrete input can undercut it on lucky search paths.
    """
    return sum(math.ceil(math.log2(k + 1)) for k in range(1, n))


@dataclass
class SortCountReport:
    n_stages: int
    n_actions: int
    global_count: int
    per_stage_count: int
    global_worst_case: int
    per_stage_worst_case: int
    info_bound_global: float
    info_bound_per_stage: float

    def gap(self) -> int:
        return self.global_count - self.per_stage_count

    def worst_case_gap(self) -> int:
        return self.global_worst_case - self.per_stage_worst_case

    def to_json_dict(self) -> dict:
        return asdict(self)


def _log2_factorial(n: int) -> float:
    return float(sum(math.log2(k) for k in range(2, n + 1)))


def count_sort_comparisons(n_stages: int, n_actions: int, seed: int = 0) -> SortCountReport:
    """Comparison cost of one global ranking versus per-stage rankings.

    Simulates binary-insertion sorting of all n_stages * n_actions rewards in
    one list, then of each stage's actions separately, on the same sampled
    reward table. Each count comes with the algorithm's worst-case budget
    (which the matching entropy bound log2((n_s n_a)!) or n_s * log2(n_a!)
    provably lower-bounds) and the bounds themselves.
    """
    if n_stages < 1 or n_actions < 1:
        raise ValueError("n_stages and n_actions must be positive")
    rng = make_rng(seed)
    rewards = rng.uniform(0.0, 10.0, size=(n_stages, n_actions))
    flat_sorted, global_count = binary_insertion_sort(list(rewards.ravel()))
    assert flat_sorted == sorted(flat_sorted)
    per_stage = 0
    for row in rewards:
        _, c = binary_insertion_sort(list(row))
        per_stage += c
    return SortCountReport(
        n_stages=n_stages,
        n_actions=n_actions,
        global_count=global_count,
        per_stage_count=per_stage,
        global_worst_case=binary_insertion_worst_case(n_stages * n_actions),
        per_stage_worst_case=n_stages * binary_insertion_worst_case(n_actions),
        info_bound_global=_log2_factorial(n_stages * n_actions),
        info_bound_per_stage=n_stages * _log2_factorial(n_actions),
    )
