"""
A temporal distance from visitation statistics, twice
=====================================================

How far apart are two states for the *policy currently running*? One
answer: compare how often trajectories from x reach y against how often
trajectories already at y stay near y. This script computes that distance
exactly from the occupancy matrix of a small chain, then recovers the
same numbers from nothing but sampled trajectories using a contrastive
(InfoNCE) energy model.
"""

import numpy as np

from stagepref.distance import (
    TabularEnergyModel,
    exact_occupancy,
    fit_successor_distance,
    learned_distance,
    successor_distance_from_occupancy,
)
from stagepref.mdp import TabularMdp, make_rng, rollout

# ---------------------------------------------------------------------
# Part 1: the exact quantity on a 6-state chain with a slip probability.

n = 6
gamma = 0.9
slip = 0.15
transition = np.zeros((n, 1, n))
for s in range(n):
    transition[s, 0, min(s + 1, n - 1)] = 1.0 - slip
    transition[s, 0, s] = transition[s, 0, s] + slip
mdp = TabularMdp(
    transition=transition,
    true_reward=np.zeros((n, 1)),
    initial_dist=np.eye(n)[0],
    gamma=gamma,
    terminal=np.zeros(n, dtype=bool),
)
policy = np.ones((n, 1))

occ = exact_occupancy(mdp, policy, gamma)
exact = successor_distance_from_occupancy(occ)

print("exact successor distance on the slip chain")
with np.printoptions(precision=3, suppress=False, linewidth=100):
    print(exact.values)
# Rows: start state. Moving right is cheap; moving left is impossible, so
# the lower triangle is +inf. The asymmetry is the point: this is a
# quasimetric, not a metric.

# ---------------------------------------------------------------------
# Part 2: learn it from rollouts alone.
#
# Sample trajectories, then train a tabular energy model whose score for
# (x, y) is anchor(y) - distance(x, y). The contrastive objective pushes
# the score toward pointwise mutual information, and after pinning the
# d(y, y) = 0 gauge the distance head lands on the exact values.

rng = make_rng(3)
trajs = [rollout(mdp, policy, horizon=40, rng=rng) for _ in range(300)]

model = TabularEnergyModel(n, lr=0.01)
fit_successor_distance(model, trajs, gamma, steps=8000, batch_size=64, rng=rng)
learned = learned_distance(model, gamma)

finite = np.isfinite(exact.values)
off_diag = finite & ~np.eye(n, dtype=bool)
gap = np.abs(learned.values - exact.values)[off_diag]
print("\nlearned vs exact over reachable pairs:"
      f" mean |error| = {gap.mean():.3f}, max |error| = {gap.max():.3f}")

print("\nexact vs learned, first row (distances from state 0):")
print("  exact  :", np.round(exact.values[0], 3))
print("  learned:", np.round(learned.values[0], 3))
